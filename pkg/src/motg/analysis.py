"""Diagnostics: Gram-matrix entropy of hidden states, token diversity, and k-tradeoff checks."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, DegenerateInputError, InvalidInputError
from .simplex import check_probability

ENUMERATION_MAX_SUPPORT = 8
SUBSET_DP_MAX_SUPPORT = 16
SPECTRUM_RTOL = 1e-12


# --- von Neumann entropy -----------------------------------------------------

def gram_entropy(Z) -> float:
    """Shannon entropy (nats) of the normalized eigenvalue spectrum of Z Z^T.

    The smaller of Z Z^T and Z^T Z is diagonalized (their nonzero spectra
    coincide). Eigenvalues under 1e-12 of the total are treated as zero.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise InvalidInputError(f"expected an (n, d) matrix with n >= 1, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise InvalidInputError("hidden states contain non-finite values")
    K = Z @ Z.T if Z.shape[0] <= Z.shape[1] else Z.T @ Z
    return spectrum_entropy(np.linalg.eigvalsh(K))


def spectrum_entropy(eigvals) -> float:
    lam = np.clip(np.asarray(eigvals, dtype=np.float64), 0.0, None)
    total = lam.sum()
    if not total > 0:
        raise DegenerateInputError("Gram matrix has zero trace")
    lam = lam[lam > SPECTRUM_RTOL * total]
    q = lam / lam.sum()
    return float(-(q * np.log(q)).sum())


def entropy_curves(trace, prefix_grid=None) -> list[tuple[int, int, float]]:
    """Entropy of the first n hidden rows for each layer and each n in ``prefix_grid``.

    ``trace`` is a list (one entry per layer) of ``(steps, d)`` arrays.
    Returns ``(layer, n, entropy)`` rows.
    """
    if not trace or trace[0].shape[0] == 0:
        raise InvalidInputError("empty hidden-state trace")
    steps = trace[0].shape[0]
    grid = range(1, steps + 1) if prefix_grid is None else [n for n in prefix_grid if 1 <= n <= steps]
    rows = []
    for layer, Z in enumerate(trace):
        for n in grid:
            rows.append((layer, n, gram_entropy(Z[:n])))
    return rows


def mean_entropy_curves(traces, prefix_grid=None) -> list[tuple[int, int, float, int]]:
    """Average per-trajectory curves over a group; returns ``(layer, n, mean_entropy, count)``."""
    acc: dict[tuple[int, int], list[float]] = {}
    for tr in traces:
        if not tr or tr[0].shape[0] == 0:
            continue
        for layer, n, h in entropy_curves(tr, prefix_grid):
            acc.setdefault((layer, n), []).append(h)
    return [(l, n, float(np.mean(v)), len(v)) for (l, n), v in sorted(acc.items())]


ENTROPY_COLUMNS = ["run", "method", "layer", "n", "entropy", "trajectories"]


def write_entropy_csv(path, rows, run: str, method: str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ENTROPY_COLUMNS)
        for layer, n, h, count in rows:
            w.writerow([run, method, layer, n, repr(h), count])


# --- token diversity ---------------------------------------------------------

@dataclass
class DiversityStats:
    per_step: list[int]
    active: list[int]
    average: float

    @classmethod
    def empty(cls):
        return cls([], [], float("nan"))


def unique_token_counts(group) -> DiversityStats:
    """Distinct token ids across a group's sampled sets, per think step.

    Step t counts only trajectories still thinking at t; the run average
    weights each step by how many trajectories were active.
    """
    longest = max((len(t.think_steps) for t in group), default=0)
    per_step, active = [], []
    for t in range(longest):
        ids: set[int] = set()
        n = 0
        for traj in group:
            if t < len(traj.think_steps):
                ids.update(traj.think_steps[t].sampled_set.token_ids)
                n += 1
        per_step.append(len(ids))
        active.append(n)
    if not per_step:
        return DiversityStats.empty()
    avg = float(np.dot(per_step, active) / np.sum(active))
    return DiversityStats(per_step, active, avg)


DIVERSITY_COLUMNS = ["run", "method", "train_step", "group", "think_step", "unique_tokens", "active_trajectories"]


# --- k tradeoff --------------------------------------------------------------

def _positive_support(p) -> tuple[np.ndarray, np.ndarray]:
    p = check_probability(p)
    idx = np.flatnonzero(p > 0)
    return idx, p[idx]


def inclusion_prob_oracle(p, k: int) -> np.ndarray:
    """Exact inclusion probability of every token in a size-k sequential PPS WOR draw.

    Brute force over all ordered draw sequences; supports of at most eight
    positive-probability tokens.
    """
    p = check_probability(p)
    idx, w = _positive_support(p)
    if idx.size > ENUMERATION_MAX_SUPPORT:
        raise CapabilityError(f"enumeration oracle handles at most {ENUMERATION_MAX_SUPPORT} tokens, got {idx.size}")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    k = min(k, idx.size)
    q = np.zeros(idx.size)
    for seq in itertools.permutations(range(idx.size), k):
        prob, used = 1.0, 0.0
        for j in seq:
            prob *= w[j] / (1.0 - used)
            used += w[j]
        q[list(seq)] += prob
    out = np.zeros_like(p)
    out[idx] = q
    return out


def inclusion_probs(p, k: int) -> np.ndarray:
    """Exact inclusion probabilities by dynamic programming over drawn subsets.

    The probability of having drawn exactly the set A after |A| draws obeys
    P(A + j) += P(A) p_j / (1 - p(A)); q_j sums P over size-k sets holding j.
    Handles up to sixteen positive-probability tokens.
    """
    p = check_probability(p)
    idx, w = _positive_support(p)
    n = idx.size
    if n > SUBSET_DP_MAX_SUPPORT:
        raise CapabilityError(f"subset DP handles at most {SUBSET_DP_MAX_SUPPORT} tokens, got {n}")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    k = min(k, n)
    mass = np.zeros(1 << n)
    for mask in range(1, 1 << n):
        low = (mask & -mask).bit_length() - 1
        mass[mask] = mass[mask & (mask - 1)] + w[low]
    layer = {0: 1.0}
    for _ in range(k):
        nxt: dict[int, float] = {}
        for mask, pr in layer.items():
            rest = 1.0 - mass[mask]
            for j in range(n):
                if not mask >> j & 1:
                    m2 = mask | 1 << j
                    nxt[m2] = nxt.get(m2, 0.0) + pr * w[j] / rest
        layer = nxt
    q = np.zeros(n)
    for mask, pr in layer.items():
        for j in range(n):
            if mask >> j & 1:
                q[j] += pr
    out = np.zeros_like(p)
    out[idx] = q
    return out


def expected_unique_tokens(q, G: int) -> float:
    """E[L] = sum_j 1 - (1 - q_j)^G for G independent draws."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(1.0 - (1.0 - q) ** G))


def zipf(n: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


@dataclass
class Prop1Row:
    k: int
    unique_mean: float
    unique_se: float
    unique_exact: float
    dist_mean: float
    dist_se: float
    dist_indep_mean: float
    dist_indep_se: float


@dataclass
class Prop1Report:
    G: int
    trials: int
    rows: list[Prop1Row] = field(default_factory=list)
    unique_increasing: bool = False
    dist_nonincreasing: bool = False
    exact_agreement: bool | None = None
    exact_z_max: float = float("nan")

    COLUMNS = ["G", "k", "unique_mean", "unique_se", "unique_exact", "dist_mean", "dist_se",
               "dist_indep_mean", "dist_indep_se"]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([self.G, r.k, *(repr(float(x)) for x in (
                    r.unique_mean, r.unique_se, r.unique_exact, r.dist_mean, r.dist_se,
                    r.dist_indep_mean, r.dist_indep_se))])


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def pps_orders(w: np.ndarray, k: int, rows: int, rng: np.random.Generator) -> np.ndarray:
    """``rows`` independent sequential PPS-without-replacement draws of length k, vectorized.

    Same procedure as :func:`motg.sampling.pps_without_replacement` (one
    uniform per draw, inverse CDF over the remaining mass), run for many rows
    at once.
    """
    n = w.size
    remaining = np.broadcast_to(w, (rows, n)).copy()
    out = np.empty((rows, k), dtype=np.int64)
    ar = np.arange(rows)
    for i in range(k):
        cum = np.cumsum(remaining, axis=1)
        u = rng.random(rows) * cum[:, -1]
        j = np.minimum((cum <= u[:, None]).sum(axis=1), n - 1)
        # step back over zero-weight (already drawn) entries at the right edge
        while True:
            bad = remaining[ar, j] <= 0
            if not bad.any():
                break
            j[bad] -= 1
        out[:, i] = j
        remaining[ar, j] = 0.0
    return out


def _prefix_mixtures(E: np.ndarray, w: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Normalized-probability mixtures of every prefix: result[..., k-1, :] uses the first k tokens."""
    ww = w[orders]
    num = np.cumsum(ww[..., None] * E[orders], axis=-2)
    return num / np.cumsum(ww, axis=-1)[..., None]


def _mean_pairwise_sq(X: np.ndarray) -> np.ndarray:
    """Mean of |x_a - x_b|^2 over pairs a < b along axis 1 of ``X`` (trials, G, d)."""
    G = X.shape[1]
    total = G * (X**2).sum(axis=(1, 2)) - (X.sum(axis=1) ** 2).sum(axis=-1)
    # the identity cancels catastrophically when every x_g is equal
    return np.maximum(total, 0.0) / (G * (G - 1) / 2)


def prop1_verify(p, E, G: int, k_grid, trials: int, rng: np.random.Generator,
                 sigma_gate: float = 3.0, exact_gate: float = 2.0,
                 exact_max_support: int = ENUMERATION_MAX_SUPPORT) -> Prop1Report:
    """Monte-Carlo check of how token diversity and mixture spread move with k.

    Each trial draws, for every one of G trajectories, one sequential PPS
    ordering of the support; the size-k set is its first k tokens (the nested
    coupling). From it come the union size L and the mean pairwise squared
    distance of normalized-probability mixtures. A second, independent set
    is drawn per k for the un-coupled distance curve. Verdicts compare each
    consecutive gap against ``sigma_gate`` pooled standard errors.

    The exact E[L] column is filled whenever the subset DP can compute it;
    the agreement verdict (``exact_gate`` standard errors) is only issued
    for supports of at most ``exact_max_support`` tokens.
    """
    p = check_probability(p)
    E = np.asarray(E, dtype=np.float64)
    idx, w = _positive_support(p)
    if idx.size > 12:
        raise CapabilityError("Monte-Carlo check supports at most 12 tokens")
    k_grid = sorted(int(k) for k in k_grid)
    if not k_grid or k_grid[0] < 1 or G < 2 or trials < 2:
        raise InvalidInputError("need k >= 1, G >= 2 and trials >= 2")
    kmax = min(k_grid[-1], idx.size)

    Ew = E[idx]
    n = idx.size
    orders = pps_orders(w, kmax, trials * G, rng).reshape(trials, G, kmax)
    mixes = _prefix_mixtures(Ew, w, orders)
    L = np.zeros((trials, len(k_grid)))
    D = np.zeros((trials, len(k_grid)))
    D_ind = np.zeros((trials, len(k_grid)))
    for c, k in enumerate(k_grid):
        kk = min(k, n)
        seen = np.zeros((trials, n), dtype=bool)
        for g in range(G):
            seen[np.arange(trials)[:, None], orders[:, g, :kk]] = True
        L[:, c] = seen.sum(axis=1)
        D[:, c] = _mean_pairwise_sq(mixes[:, :, kk - 1])
        fresh = pps_orders(w, kk, trials * G, rng).reshape(trials, G, kk)
        D_ind[:, c] = _mean_pairwise_sq(_prefix_mixtures(Ew, w, fresh)[:, :, kk - 1])

    report = Prop1Report(G, trials)
    have_exact = idx.size <= SUBSET_DP_MAX_SUPPORT
    exact_ok = True if idx.size <= exact_max_support else None
    zmax = 0.0
    for c, k in enumerate(k_grid):
        um, us = _mean_se(L[:, c])
        dm, ds = _mean_se(D[:, c])
        im, is_ = _mean_se(D_ind[:, c])
        exact = expected_unique_tokens(inclusion_probs(p, k), G) if have_exact else float("nan")
        if exact_ok is not None:
            z = abs(um - exact) / us if us > 0 else (0.0 if um == exact else math.inf)
            zmax = max(zmax, z)
            exact_ok = exact_ok and z <= exact_gate
        report.rows.append(Prop1Row(k, um, us, exact, dm, ds, im, is_))

    rows = report.rows
    report.unique_increasing = all(
        b.unique_mean - a.unique_mean > sigma_gate * math.hypot(a.unique_se, b.unique_se)
        for a, b in zip(rows, rows[1:])
    )
    report.dist_nonincreasing = all(
        b.dist_mean - a.dist_mean <= sigma_gate * math.hypot(a.dist_se, b.dist_se)
        for a, b in zip(rows, rows[1:])
    )
    report.exact_agreement = exact_ok
    report.exact_z_max = zmax if exact_ok is not None else float("nan")
    return report
