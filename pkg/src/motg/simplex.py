"""Probability-simplex arithmetic and Dirichlet sampling.

Probability vectors are plain float64 ``numpy`` arrays; :func:`check_probability`
enforces the simplex invariants wherever a vector crosses a module boundary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

SIMPLEX_ATOL = 1e-9
UNDERFLOW_FLOOR = 1e-300


def check_probability(p, atol: float = SIMPLEX_ATOL) -> np.ndarray:
    """Validate ``p`` as a point on the simplex and return it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError(f"probability vector must be 1-d and non-empty, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("probability vector has non-finite entries")
    if np.any(p < 0):
        raise InvalidInputError("probability vector has negative entries")
    total = p.sum()
    if abs(total - 1.0) > atol:
        raise InvalidInputError(f"probability vector sums to {total!r}, not 1")
    return p


def normalize(raw) -> np.ndarray:
    """Scale a non-negative vector onto the simplex."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size == 0:
        raise InvalidInputError(f"expected a non-empty 1-d vector, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("non-finite entry")
    if np.any(raw < 0):
        raise InvalidInputError("negative entry")
    total = raw.sum()
    if total <= 0:
        raise DegenerateInputError("cannot normalize an all-zero vector")
    return raw / total


def shannon_entropy(p) -> float:
    """Entropy in nats, with 0 ln 0 = 0."""
    p = check_probability(p)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass(frozen=True)
class DirichletParams:
    """``Dir(concentration * base)``; every base entry must be strictly positive."""

    base: np.ndarray
    concentration: float = 1.0

    def __post_init__(self):
        base = check_probability(self.base)
        if not (np.isfinite(self.concentration) and self.concentration > 0):
            raise InvalidInputError(f"concentration must be positive, got {self.concentration!r}")
        if np.any(base <= 0):
            raise InvalidInputError("Dirichlet base has zero entries; drop them first (see on_support)")
        object.__setattr__(self, "base", base)

    @classmethod
    def on_support(cls, p, concentration: float = 1.0) -> tuple["DirichletParams", np.ndarray]:
        """Build params over the positive entries of ``p``; also return their indices."""
        p = check_probability(p)
        support = np.flatnonzero(p > 0)
        return cls(normalize(p[support]), concentration), support

    @property
    def alpha(self) -> np.ndarray:
        return self.concentration * self.base


def sample_gamma(alpha, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Gamma(alpha, 1) draws by Marsaglia-Tsang squeeze rejection.

    ``alpha`` may be an array; the result has shape ``(size, *alpha.shape)``
    (or ``alpha.shape`` when ``size`` is None). Shapes below 1 use the boost
    Gamma(a) = Gamma(a + 1) * U ** (1 / a).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
        raise InvalidInputError("gamma shape must be finite and positive")
    shape = alpha.shape if size is None else (size, *alpha.shape)
    a = np.broadcast_to(alpha, shape).ravel()
    boost = a < 1
    a_eff = np.where(boost, a + 1.0, a)
    d = a_eff - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    out = np.empty_like(a_eff)
    pending = np.arange(a_eff.size)
    while pending.size:
        x = rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        v = (1.0 + c[pending] * x) ** 3
        ok = v > 0
        safe_v = np.where(ok, v, 1.0)
        accept = ok & (
            (u < 1.0 - 0.0331 * x**4)
            | (np.log(u) < 0.5 * x**2 + d[pending] * (1.0 - safe_v + np.log(safe_v)))
        )
        out[pending[accept]] = d[pending[accept]] * safe_v[accept]
        pending = pending[~accept]

    if np.any(boost):
        u = rng.random(int(boost.sum()))
        out[boost] *= u ** (1.0 / a[boost])
    return out.reshape(shape)


def sample_dirichlet(params: DirichletParams, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from ``Dir(c p)`` by normalizing independent Gamma draws.

    Exact-zero coordinates from float underflow are floored at 1e-300 before
    renormalizing so that every coordinate stays strictly positive.
    """
    if params.base.size == 1:
        return np.ones(1) if size is None else np.ones((size, 1))
    g = sample_gamma(params.alpha, rng, size=size)
    g = np.maximum(g, UNDERFLOW_FLOOR)
    return g / g.sum(axis=-1, keepdims=True)


def dirichlet_moments(params: DirichletParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form mean, variance and covariance matrix of ``Dir(c p)``."""
    p = params.base
    scale = 1.0 / (params.concentration + 1.0)
    mean = p.copy()
    var = p * (1.0 - p) * scale
    cov = -np.outer(p, p) * scale
    np.fill_diagonal(cov, var)
    return mean, var, cov


@dataclass(frozen=True)
class MomentRow:
    """One empirical-vs-closed-form comparison; ``z`` is the gap in standard errors."""

    stat: str  # "mean", "var" or "cov"
    i: int
    j: int
    empirical: float
    exact: float
    se: float

    @property
    def z(self) -> float:
        gap = abs(self.empirical - self.exact)
        if self.se > 0:
            return gap / self.se
        return 0.0 if gap == 0 else float("inf")


def moment_check(params: DirichletParams, n: int, rng: np.random.Generator) -> list[MomentRow]:
    """Compare ``n`` draws against :func:`dirichlet_moments`.

    Variances and covariances are estimated around the known mean ``p`` so
    each estimate is a plain sample mean and its standard error is the usual
    ``std / sqrt(n)``.
    """
    if n < 2:
        raise InvalidInputError("need at least two draws")
    X = sample_dirichlet(params, rng, size=n)
    mean, var, cov = dirichlet_moments(params)
    D = X - mean
    rows = []
    root = np.sqrt(n)
    for i in range(mean.size):
        rows.append(MomentRow("mean", i, i, float(X[:, i].mean()), float(mean[i]),
                              float(X[:, i].std(ddof=1) / root)))
    for i in range(mean.size):
        for j in range(i, mean.size):
            prod = D[:, i] * D[:, j]
            rows.append(MomentRow("var" if i == j else "cov", i, j, float(prod.mean()), float(cov[i, j]),
                                  float(prod.std(ddof=1) / root)))
    return rows
