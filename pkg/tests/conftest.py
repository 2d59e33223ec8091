import numpy as np
import pytest
import torch

from motg.model import ModelConfig, TinyDecoder
from motg.tasks import VOCAB

torch.set_num_threads(1)


def tiny_model(seed=0, dtype="float64", layers=1, d=16, hidden=32, heads=2, context=40, vocab=None):
    cfg = ModelConfig(vocab_size=vocab or len(VOCAB), embed_dim=d, hidden_dim=hidden, num_layers=layers,
                      num_heads=heads, context_length=context, seed=seed, dtype=dtype)
    return TinyDecoder(cfg)


def random_simplex(rng, n, sparsity=0.0):
    p = rng.dirichlet(np.ones(n))
    if sparsity:
        p[rng.random(n) < sparsity] = 0.0
        if p.sum() == 0:
            p[0] = 1.0
        p /= p.sum()
    return p


@pytest.fixture
def model():
    return tiny_model()


def fd_relative_errors(model, loss_fn, n_entries=40, h=1e-6, seed=0, floor=1e-7):
    """Central finite differences on randomly chosen parameter entries.

    Returns per-entry relative errors |g - fd| / max(|g|, |fd|); entries where
    both are below ``floor`` are compared absolutely instead (error = |g - fd|).
    """
    from motg.model import loss_and_grad

    _, grads = loss_and_grad(model, loss_fn)
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    names = sorted(params)
    errs = []
    for _ in range(n_entries):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            up = float(loss_fn(model))
            p[idx] = old - h
            down = float(loss_fn(model))
            p[idx] = old
        fd = (up - down) / (2 * h)
        g = grads[name][idx].item()
        scale = max(abs(g), abs(fd))
        errs.append(abs(g - fd) / scale if scale > floor else abs(g - fd))
    return np.asarray(errs)
