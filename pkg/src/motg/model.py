"""A miniature pre-norm decoder that reads embedding rows, not token ids.

Feeding rows directly is what lets a mixture embedding stand in for a token:
:meth:`TinyDecoder.forward` never looks at ids, and :func:`embed_sequence` is
the only place ids turn into rows.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    CheckpointError,
    ConfigMismatchError,
    ContextOverflowError,
    InvalidInputError,
    NumericalFailureError,
)
from .rng import stream
from .tasks import VOCAB

log = logging.getLogger(__name__)

TracePoint = Literal["residual", "attn", "mlp"]
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = len(VOCAB)
    embed_dim: int = 96
    hidden_dim: int = 384
    num_layers: int = 2
    num_heads: int = 4
    context_length: int = 48
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"
    trace_point: TracePoint = "residual"

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise InvalidInputError("embed_dim must be divisible by num_heads")
        for name in ("vocab_size", "embed_dim", "hidden_dim", "num_layers", "num_heads", "context_length"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.dtype not in _DTYPES:
            raise InvalidInputError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.trace_point not in ("residual", "attn", "mlp"):
            raise InvalidInputError(f"unknown trace_point {self.trace_point!r}")


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        mu = x.mean(-1, keepdim=True)
        var = ((x - mu) ** 2).mean(-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + 1e-5) * self.weight + self.bias


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.n_heads = cfg.num_heads
        self.ln1 = LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = LayerNorm(d)
        self.fc = nn.Linear(d, cfg.hidden_dim)
        self.fc_out = nn.Linear(cfg.hidden_dim, d)

    def forward(self, x):
        t, d = x.shape[-2:]
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(*x.shape[:-2], t, h, d // h).transpose(-3, -2)
        k = k.view(*x.shape[:-2], t, h, d // h).transpose(-3, -2)
        v = v.view(*x.shape[:-2], t, h, d // h).transpose(-3, -2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(-1)
        y = (att @ v).transpose(-3, -2).reshape(*x.shape[:-2], t, d)
        attn_out = self.proj(y)
        x = x + attn_out
        mlp_out = self.fc_out(torch.nn.functional.gelu(self.fc(self.ln2(x))))
        x = x + mlp_out
        return x, attn_out, mlp_out


class TinyDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, d))
        self.pos_emb = nn.Parameter(torch.empty(cfg.context_length, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.ln_f = LayerNorm(d)
        self.out_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.to(_DTYPES[cfg.dtype])
        self._init_params()

    def _init_params(self):
        # numpy-driven init so that weights depend only on the seed, not on torch's global RNG
        rng = stream(self.cfg.seed, "init")
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif name.startswith(("ln", "ln_f")) or ".ln" in name:
                    p.fill_(1.0)
                else:
                    std = 0.02
                    if name.endswith(("proj.weight", "fc_out.weight")):
                        std /= math.sqrt(2 * self.cfg.num_layers)
                    p.copy_(torch.from_numpy(rng.normal(0.0, std, size=tuple(p.shape))))

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, X: torch.Tensor):
        """Map embedding rows ``(t, d)`` to logits ``(t, V)`` and per-layer hidden rows.

        Hidden rows are taken at ``cfg.trace_point``: the post-block residual
        stream, the attention output, or the MLP output.
        """
        t = X.shape[-2]
        if t < 1:
            raise InvalidInputError("empty embedding sequence")
        if t > self.cfg.context_length:
            raise ContextOverflowError(f"sequence of {t} rows exceeds context {self.cfg.context_length}")
        x = X + self.pos_emb[:t]
        hidden = []
        for block in self.blocks:
            x, attn_out, mlp_out = block(x)
            hidden.append({"residual": x, "attn": attn_out, "mlp": mlp_out}[self.cfg.trace_point])
        logits = self.ln_f(x) @ self.tok_emb.T + self.out_bias
        return logits, hidden

    def forward_ids(self, ids) -> torch.Tensor:
        """Discrete-token formulation of the same network (logits only)."""
        idx = torch.as_tensor(list(ids), dtype=torch.long)
        return self.forward(nn.functional.embedding(idx, self.tok_emb))[0]


def embed(model: TinyDecoder, token_id: int) -> torch.Tensor:
    if not 0 <= token_id < model.cfg.vocab_size:
        raise InvalidInputError(f"token id {token_id} outside [0, {model.cfg.vocab_size})")
    return model.tok_emb[token_id]


def embed_sequence(model: TinyDecoder, ids) -> torch.Tensor:
    ids = list(ids)
    if not ids:
        return model.tok_emb[:0]
    for i in ids:
        if not 0 <= i < model.cfg.vocab_size:
            raise InvalidInputError(f"token id {i} outside [0, {model.cfg.vocab_size})")
    return model.tok_emb[ids]


def log_probs(logits: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits.double(), dim=-1)


@torch.no_grad()
def next_distribution(model: TinyDecoder, X: torch.Tensor) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Final-position distribution (float64), per-layer final hidden rows, and all positions' distributions."""
    logits, hidden = model(X)
    probs = torch.softmax(logits.double(), dim=-1).numpy()
    return probs[-1], [h[-1].double().numpy() for h in hidden], probs


def loss_and_grad(model: TinyDecoder, loss_fn: Callable[[TinyDecoder], torch.Tensor], step: int | None = None):
    """Evaluate a scalar loss built from forward outputs and return its exact gradient."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    if loss.dim() != 0:
        raise InvalidInputError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NumericalFailureError(f"non-finite loss {loss.item()!r} at step {step}")
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def optimizer_step(model: TinyDecoder, grads: dict[str, torch.Tensor], state: AdamState, lr: float) -> bool:
    """Apply one bias-corrected Adam update in place. Returns False if skipped."""
    params = dict(model.named_parameters())
    if set(grads) != set(params):
        raise InvalidInputError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise InvalidInputError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            log.warning("non-finite gradient in %s; skipping optimizer step %d", name, state.step + 1)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return True


def snapshot(model: TinyDecoder) -> TinyDecoder:
    """Frozen copy used as the KL reference."""
    ref = TinyDecoder(model.cfg)
    ref.load_state_dict(model.state_dict())
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref


# --- checkpoints -------------------------------------------------------------

MAGIC = b"MOTGCKPT"
FORMAT_VERSION = 1
_NP_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _tensor_table(model: TinyDecoder, opt: AdamState):
    out = [("param/" + n, p.detach()) for n, p in model.named_parameters()]
    out += [("adam_m/" + n, t) for n, t in sorted(opt.m.items())]
    out += [("adam_v/" + n, t) for n, t in sorted(opt.v.items())]
    return out


def save_checkpoint(path, model: TinyDecoder, opt: AdamState, rng_state: dict | None, extra: dict | None = None):
    """Write a versioned binary checkpoint: magic, version, JSON header, raw little-endian tensors."""
    entries, blobs, offset = [], [], 0
    for name, t in _tensor_table(model, opt):
        dt = str(t.dtype).removeprefix("torch.")
        raw = np.ascontiguousarray(t.cpu().numpy(), dtype=_NP_DTYPES[dt]).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": asdict(model.cfg),
        "tensors": entries,
        "adam": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "rng_state": rng_state,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Inverse of :func:`save_checkpoint`; returns ``(model, adam_state, rng_state, extra)``."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    try:
        header = json.loads(data[start : start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    cfg = ModelConfig(**header["config"])
    if expected_config is not None and cfg != expected_config:
        raise ConfigMismatchError(f"{path}: checkpoint config {cfg} differs from expected {expected_config}")
    body = data[start + hlen :]
    expected_len = sum(e["nbytes"] for e in header["tensors"])
    if len(body) != expected_len:
        raise CheckpointError(f"{path}: body has {len(body)} bytes, header promises {expected_len}")

    model = TinyDecoder(cfg)
    a = header["adam"]
    opt = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    params = dict(model.named_parameters())
    with torch.no_grad():
        for e in header["tensors"]:
            arr = np.frombuffer(body, dtype=_NP_DTYPES[e["dtype"]], count=math.prod(e["shape"]), offset=e["offset"])
            t = torch.from_numpy(arr.reshape(e["shape"]).copy())
            kind, name = e["name"].split("/", 1)
            if name not in params:
                raise CheckpointError(f"{path}: unknown tensor {e['name']}")
            if kind == "param":
                params[name].copy_(t)
            elif kind == "adam_m":
                opt.m[name] = t
            elif kind == "adam_v":
                opt.v[name] = t
            else:
                raise CheckpointError(f"{path}: unknown tensor kind {kind}")
    return model, opt, header["rng_state"], header["extra"]
