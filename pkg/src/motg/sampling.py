"""The ``sample`` hook: pick up to k distinct tokens from a next-token distribution."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InvalidInputError
from .simplex import check_probability

log = logging.getLogger(__name__)

RuleKind = Literal["top_k", "min_p", "nucleus", "swr_k"]


@dataclass(frozen=True)
class SampledSet:
    """Distinct token ids in draw order, with their untempered model probabilities."""

    token_ids: tuple[int, ...]
    raw_probs: tuple[float, ...]
    rule: RuleKind

    def __post_init__(self):
        if not self.token_ids:
            raise InvalidInputError("sampled set is empty")
        if len(set(self.token_ids)) != len(self.token_ids):
            raise InvalidInputError(f"duplicate token ids in {self.token_ids}")
        if len(self.raw_probs) != len(self.token_ids):
            raise InvalidInputError("token_ids and raw_probs differ in length")

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class SamplingRule:
    kind: RuleKind = "top_k"
    k: int = 2
    p_min: float | None = None
    cum_threshold: float | None = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError(f"k must be >= 1, got {self.k}")
        if self.kind == "min_p":
            if self.p_min is None or not 0 < self.p_min < 1:
                raise InvalidInputError("min_p rule needs 0 < p_min < 1")
        elif self.p_min is not None:
            raise InvalidInputError("p_min only applies to the min_p rule")
        if self.kind == "nucleus":
            if self.cum_threshold is None or not 0 < self.cum_threshold <= 1:
                raise InvalidInputError("nucleus rule needs 0 < cum_threshold <= 1")
        elif self.cum_threshold is not None:
            raise InvalidInputError("cum_threshold only applies to the nucleus rule")
        if self.kind not in ("top_k", "min_p", "nucleus", "swr_k"):
            raise InvalidInputError(f"unknown sampling rule {self.kind!r}")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise InvalidInputError("temperature must be finite and positive")


def apply_temperature(p, temperature: float) -> np.ndarray:
    """Return p ** (1/T), renormalized. Zero entries stay zero."""
    p = check_probability(p)
    if not math.isfinite(temperature) or temperature <= 0:
        raise InvalidInputError(f"temperature must be finite and positive, got {temperature!r}")
    if temperature == 1.0:
        return p
    out = np.zeros_like(p)
    nz = p > 0
    z = np.log(p[nz]) / temperature
    z -= z.max()
    e = np.exp(z)
    out[nz] = e / e.sum()
    return out


def draw_index(weights: np.ndarray, rng: np.random.Generator) -> int:
    """One categorical draw by inverse CDF; consumes exactly one uniform."""
    cum = np.cumsum(weights)
    u = rng.random() * cum[-1]
    i = int(np.searchsorted(cum, u, side="right"))
    # guard against u landing on the final edge or on trailing zero-weight entries
    i = min(i, len(weights) - 1)
    while weights[i] <= 0:
        i -= 1
    return i


def pps_without_replacement(ids: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """Sequential probability-proportional-to-size draws without replacement.

    Draw one id proportional to ``weights``, remove it, renormalize over the
    rest, repeat ``k`` times or until the positive support runs out. Returns
    ids in draw order.
    """
    ids = np.asarray(ids)
    w = np.asarray(weights, dtype=np.float64).copy()
    picked: list[int] = []
    for _ in range(min(k, int((w > 0).sum()))):
        i = draw_index(w, rng)
        picked.append(int(ids[i]))
        w[i] = 0.0
    return picked


def _as_set(p: np.ndarray, ids, rule: RuleKind) -> SampledSet:
    ids = tuple(int(i) for i in ids)
    return SampledSet(ids, tuple(float(p[i]) for i in ids), rule)


def _rank(p: np.ndarray) -> np.ndarray:
    # descending probability, ties toward the lower id
    return np.argsort(-p, kind="stable")


def sample_top_k(p, k: int) -> SampledSet:
    p = check_probability(p)
    order = _rank(p)
    chosen = [i for i in order[:k] if p[i] > 0]
    return _as_set(p, chosen, "top_k")


def _draw_from_pool(p: np.ndarray, pool: np.ndarray, k: int, temperature: float, rng, rule: RuleKind) -> SampledSet:
    pool = np.sort(pool)
    w = p[pool]
    if temperature != 1.0:
        w = apply_temperature(w / w.sum(), temperature)
    chosen = pps_without_replacement(pool, w, k, rng)
    return _as_set(p, chosen, rule)


def sample_min_p(p, p_min: float, k: int, rng: np.random.Generator, temperature: float = 1.0) -> SampledSet:
    """WOR draws from the tokens whose probability exceeds ``p_min``.

    An empty pool falls back to the single most likely token.
    """
    p = check_probability(p)
    if not 0 < p_min < 1:
        raise InvalidInputError(f"p_min must lie in (0, 1), got {p_min!r}")
    pool = np.flatnonzero(p > p_min)
    if pool.size == 0:
        log.warning("min_p pool empty at p_min=%g (max prob %g); falling back to top-1", p_min, p.max())
        return _as_set(p, [int(_rank(p)[0])], "min_p")
    return _draw_from_pool(p, pool, k, temperature, rng, "min_p")


def sample_nucleus(p, cum_threshold: float, k: int, rng: np.random.Generator, temperature: float = 1.0) -> SampledSet:
    """WOR draws from the smallest top-probability prefix holding ``cum_threshold`` mass."""
    p = check_probability(p)
    if not 0 < cum_threshold <= 1:
        raise InvalidInputError(f"cum_threshold must lie in (0, 1], got {cum_threshold!r}")
    order = _rank(p)
    cum = np.cumsum(p[order])
    # tolerance so that threshold 1.0 is reachable despite rounding
    n = int(np.searchsorted(cum, cum_threshold - 1e-12, side="left")) + 1
    pool = order[: min(n, int((p > 0).sum()))]
    return _draw_from_pool(p, pool, k, temperature, rng, "nucleus")


def sample_swr_k(p, k: int, temperature: float, rng: np.random.Generator) -> SampledSet:
    """k sequential PPS draws without replacement from the tempered distribution."""
    p = check_probability(p)
    q = apply_temperature(p, temperature)
    support = np.flatnonzero(q > 0)
    chosen = pps_without_replacement(support, q[support], k, rng)
    return _as_set(p, chosen, "swr_k")


def sample(p, rule: SamplingRule, rng: np.random.Generator) -> SampledSet:
    if rule.kind == "top_k":
        return sample_top_k(p, rule.k)
    if rule.kind == "min_p":
        return sample_min_p(p, rule.p_min, rule.k, rng, rule.temperature)
    if rule.kind == "nucleus":
        return sample_nucleus(p, rule.cum_threshold, rule.k, rng, rule.temperature)
    return sample_swr_k(p, rule.k, rule.temperature, rng)
