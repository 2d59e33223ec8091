import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motg.analysis import (
    DIVERSITY_COLUMNS,
    entropy_curves,
    expected_unique_tokens,
    gram_entropy,
    inclusion_prob_oracle,
    inclusion_probs,
    mean_entropy_curves,
    pps_orders,
    prop1_verify,
    unique_token_counts,
    write_entropy_csv,
    zipf,
)
from motg.errors import CapabilityError, DegenerateInputError, InvalidInputError
from motg.generation import StepRecord, Trajectory
from motg.sampling import SampledSet


def test_entropy_anchor_values():
    assert gram_entropy(np.eye(5, 8)) == pytest.approx(math.log(5), abs=1e-12)
    u, v = np.arange(1.0, 5.0), np.arange(1.0, 7.0)
    assert gram_entropy(np.outer(u, v)) == pytest.approx(0.0, abs=1e-12)
    assert gram_entropy(np.eye(2) * [1.0, 1e-20]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DegenerateInputError):
        gram_entropy(np.zeros((3, 4)))
    with pytest.raises(InvalidInputError):
        gram_entropy(np.array([[np.nan, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_entropy_rotation_invariance_and_bounds(n, d, seed):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, d))
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    h = gram_entropy(Z)
    assert gram_entropy(Z @ Q) == pytest.approx(h, abs=1e-9)
    assert gram_entropy(3.7 * Z) == pytest.approx(h, abs=1e-9)
    assert -1e-12 <= h <= math.log(min(n, d)) + 1e-12


def test_entropy_curves_and_mean():
    rng = np.random.default_rng(0)
    trace = [rng.standard_normal((4, 6)), rng.standard_normal((4, 6))]
    rows = entropy_curves(trace)
    assert [(l, n) for l, n, _ in rows] == [(l, n) for l in range(2) for n in range(1, 5)]
    assert all(h == pytest.approx(0.0, abs=1e-12) for l, n, h in rows if n == 1)
    assert [r[1] for r in entropy_curves(trace, [2, 9])] == [2, 2]
    m = mean_entropy_curves([trace, [t[:2] for t in trace], []], [1, 2, 3])
    counts = {(l, n): c for l, n, _, c in m}
    assert counts[(0, 2)] == 2 and counts[(0, 3)] == 1
    with pytest.raises(InvalidInputError):
        entropy_curves([])


def test_write_entropy_csv(tmp_path):
    write_entropy_csv(tmp_path / "e.csv", [(0, 1, 0.5, 3)], "r", "m")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["run", "method", "layer", "n", "entropy", "trajectories"]
    assert rows[1] == ["r", "m", "0", "1", "0.5", "3"]


def _traj(sets):
    steps = [StepRecord(SampledSet(tuple(s), tuple([0.1] * len(s)), "swr_k"), None, "elementwise_max",
                        np.zeros(2), 0.0, []) for s in sets]
    return Trajectory((1,), steps, [2], "", "criteria")


def test_unique_token_counts():
    group = [_traj([[1, 2], [3, 4]]), _traj([[2, 5]]), _traj([])]
    d = unique_token_counts(group)
    assert d.per_step == [3, 2] and d.active == [2, 1]
    assert d.average == pytest.approx((3 * 2 + 2 * 1) / 3)
    assert math.isnan(unique_token_counts([_traj([])]).average)
    assert DIVERSITY_COLUMNS[-2:] == ["unique_tokens", "active_trajectories"]


def test_inclusion_oracle_hand_values():
    p = np.array([0.5, 0.3, 0.2])
    q2 = inclusion_prob_oracle(p, 2)
    # P(0 in S) = 0.5 + 0.3*0.5/0.7 + 0.2*0.5/0.8
    assert q2[0] == pytest.approx(0.5 + 0.15 / 0.7 + 0.1 / 0.8, rel=1e-14)
    assert q2.sum() == pytest.approx(2.0, rel=1e-14)
    np.testing.assert_allclose(inclusion_prob_oracle(p, 1), p, rtol=1e-15)
    np.testing.assert_allclose(inclusion_prob_oracle(p, 5), 1.0, rtol=1e-15)
    np.testing.assert_allclose(inclusion_prob_oracle(np.array([0.5, 0.0, 0.5]), 2), [1.0, 0.0, 1.0])
    with pytest.raises(CapabilityError):
        inclusion_prob_oracle(zipf(9), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_subset_dp_matches_enumeration(n, k, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(n))
    np.testing.assert_allclose(inclusion_probs(p, k), inclusion_prob_oracle(p, k), rtol=1e-12, atol=1e-15)
    assert inclusion_probs(p, k).sum() == pytest.approx(min(k, n), rel=1e-12)


def test_expected_unique_tokens():
    p = np.full(4, 0.25)
    assert expected_unique_tokens(inclusion_probs(p, 1), 2) == pytest.approx(1.75)
    assert expected_unique_tokens(inclusion_probs(p, 2), 2) == pytest.approx(3.0)


def test_pps_orders_marginals():
    w = zipf(5)
    orders = pps_orders(w, 3, 40_000, np.random.default_rng(0))
    assert all(len(set(r)) == 3 for r in orders[:500])
    q = inclusion_probs(w, 3)
    freq = np.bincount(orders.ravel(), minlength=5) / 40_000
    assert np.all(np.abs(freq - q) < 4 * np.sqrt(q * (1 - q) / 40_000) + 1e-12)


def test_prop1_small_case():
    p = np.full(4, 0.25)
    E = np.random.default_rng(0).standard_normal((4, 6))
    rep = prop1_verify(p, E, 2, [1, 2, 3, 4], 4000, np.random.default_rng(1))
    assert rep.unique_increasing and rep.dist_nonincreasing
    assert rep.exact_agreement is not None
    last = rep.rows[-1]
    assert last.unique_mean == 4 and last.dist_mean == 0.0  # k = |support| gives identical mixtures
    with pytest.raises(InvalidInputError):
        prop1_verify(p, E, 1, [1], 10, np.random.default_rng(0))


def test_prop1_exact_verdict_only_on_small_support():
    E = np.random.default_rng(0).standard_normal((10, 4))
    rep = prop1_verify(zipf(10), E, 2, [1, 2], 500, np.random.default_rng(0))
    assert rep.exact_agreement is None
    assert all(np.isfinite(r.unique_exact) for r in rep.rows)  # still reported from the subset DP
