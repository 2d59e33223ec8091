"""The ``aggregate`` hook: fold a sampled token set into one input embedding.

Embedding tables may be numpy arrays or torch tensors; the result has the
table's type so that the generation loop can keep mixtures on the autograd
tape when it needs to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

from .errors import DegenerateInputError, InvalidInputError
from .sampling import SampledSet
from .simplex import DirichletParams, sample_dirichlet

AggKind = Literal["uniform", "normalized_prob", "dirichlet", "elementwise_max"]


@dataclass(frozen=True)
class AggregationRule:
    kind: AggKind = "normalized_prob"
    dirichlet_concentration: float | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "normalized_prob", "dirichlet", "elementwise_max"):
            raise InvalidInputError(f"unknown aggregation {self.kind!r}")
        if self.kind == "dirichlet":
            c = self.dirichlet_concentration
            if c is None:
                object.__setattr__(self, "dirichlet_concentration", 1.0)
            elif not (math.isfinite(c) and c > 0):
                raise InvalidInputError("dirichlet_concentration must be positive")
        elif self.dirichlet_concentration is not None:
            raise InvalidInputError("dirichlet_concentration only applies to the dirichlet rule")


@dataclass
class MixtureEmbedding:
    vector: np.ndarray | torch.Tensor
    sampled_set: SampledSet
    weights: np.ndarray | None  # None for element-wise max
    kind: AggKind


def weights_uniform(S: SampledSet) -> np.ndarray:
    return np.full(len(S), 1.0 / len(S))


def weights_normalized_prob(S: SampledSet) -> np.ndarray:
    raw = np.asarray(S.raw_probs, dtype=np.float64)
    total = raw.sum()
    if not total > 0:
        raise DegenerateInputError("sampled set carries zero probability mass")
    return raw / total


def weights_dirichlet(S: SampledSet, concentration: float, rng: np.random.Generator) -> np.ndarray:
    """Draw from Dir(c * normalized raw probabilities). Singletons consume no randomness."""
    if len(S) == 1:
        return np.ones(1)
    return sample_dirichlet(DirichletParams(weights_normalized_prob(S), concentration), rng)


def mixture_weights(S: SampledSet, rule: AggregationRule, rng: np.random.Generator) -> np.ndarray | None:
    if rule.kind == "uniform":
        return weights_uniform(S)
    if rule.kind == "normalized_prob":
        return weights_normalized_prob(S)
    if rule.kind == "dirichlet":
        return weights_dirichlet(S, rule.dirichlet_concentration, rng)
    return None


def _rows(S: SampledSet, E):
    ids = list(S.token_ids)
    n = E.shape[0]
    if any(i < 0 or i >= n for i in ids):
        raise InvalidInputError(f"token ids {ids} out of range for a table with {n} rows")
    return E[ids]


def mix_weighted(S: SampledSet, w, E, kind: AggKind = "normalized_prob") -> MixtureEmbedding:
    """Sum of member embeddings weighted by ``w``."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(S),):
        raise InvalidInputError(f"{w.size} weights for a set of size {len(S)}")
    rows = _rows(S, E)
    if len(S) == 1:
        vec = rows[0]
    elif isinstance(E, torch.Tensor):
        vec = torch.as_tensor(w, dtype=E.dtype) @ rows
    else:
        vec = w @ rows
    return MixtureEmbedding(vec, S, w, kind)


def mix_elementwise_max(S: SampledSet, E) -> MixtureEmbedding:
    rows = _rows(S, E)
    vec = rows.max(dim=0).values if isinstance(E, torch.Tensor) else rows.max(axis=0)
    return MixtureEmbedding(vec, S, None, "elementwise_max")


def aggregate(S: SampledSet, rule: AggregationRule, E, rng: np.random.Generator) -> MixtureEmbedding:
    if rule.kind == "elementwise_max":
        return mix_elementwise_max(S, E)
    return mix_weighted(S, mixture_weights(S, rule, rng), E, rule.kind)


def rebuild(S: SampledSet, weights, kind: AggKind, E):
    """Recompute a recorded mixture against a (possibly different) embedding table."""
    if kind == "elementwise_max":
        return mix_elementwise_max(S, E).vector
    return mix_weighted(S, weights, E, kind).vector
