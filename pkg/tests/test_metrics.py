from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mccf.inference import InferenceConfig, Rollout, open_loop_rollout
from mccf.metrics import (EvalReport, ade, dtw_distance, fair_filter, fde, format_prob_table, format_table,
                          geom_mean_prob, mann_whitney, min_over_rollouts, open_loop_metrics, overlap_rate,
                          prob_report, rmse_one_step)
from mccf.state_space import TransitionMatrix
from mccf.trajdata import derive_states


def brute_dtw(x, y):
    """Minimum over every monotone warping path, enumerated explicitly."""
    best = math.inf
    m, n = len(x), len(y)

    def walk(i, j, acc):
        nonlocal best
        acc += (x[i] - y[j]) ** 2
        if i == m - 1 and j == n - 1:
            best = min(best, acc)
            return
        if i + 1 < m:
            walk(i + 1, j, acc)
        if j + 1 < n:
            walk(i, j + 1, acc)
        if i + 1 < m and j + 1 < n:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best


def roll(positions, crashed=False):
    p = np.asarray(positions, float)
    return Rollout(p, p.copy(), np.zeros_like(p), p.copy(), np.zeros_like(p), crashed)


def test_rmse_examples():
    assert rmse_one_step([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse_one_step(np.full(7, 2.5), np.zeros(7)) == pytest.approx(2.5)
    assert rmse_one_step([3.0, 4.0], [0.0, 0.0]) == pytest.approx(math.sqrt(12.5))
    assert rmse_one_step([np.ones(10), np.zeros(30)], [np.zeros(10), np.zeros(30)]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        rmse_one_step([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        rmse_one_step([], [])


def test_dtw_examples():
    assert dtw_distance([1, 2, 3], [1, 2, 3]) == 0.0
    assert dtw_distance([0], [3]) == 9.0
    assert dtw_distance([1, 2], [1, 2, 2]) == 0.0
    with pytest.raises(ValueError):
        dtw_distance([], [1])


@settings(max_examples=150, deadline=None)
@given(x=st.lists(st.floats(-50, 50), min_size=1, max_size=7),
       y=st.lists(st.floats(-50, 50), min_size=1, max_size=7))
def test_dtw_matches_enumeration_and_is_symmetric(x, y):
    d = dtw_distance(x, y)
    assert d == pytest.approx(brute_dtw(x, y), rel=1e-12, abs=1e-12)
    assert d == dtw_distance(y, x)
    assert dtw_distance(x, x) == 0.0


def test_ade_fde_and_min_semantics():
    truth = np.arange(10.0)
    r1, r2 = roll(truth + 1), roll(truth + 2)
    assert ade(r1.positions, truth) == 1.0 and fde(r2.positions, truth) == 2.0
    assert min_over_rollouts(lambda r: ade(r.positions, truth), [r1, r2]) == 1.0
    assert min_over_rollouts(lambda r: ade(r.positions, truth), [r2]) == ade(r2.positions, truth)
    # crashed rollouts are ignored; truncated rollouts compare against the matching prefix
    short = roll(truth[:4], crashed=True)
    assert min_over_rollouts(lambda r: ade(r.positions, truth), [r2, short]) == 2.0
    assert fde(truth[:4] + 0.5, truth) == 0.5
    with pytest.raises(ValueError):
        min_over_rollouts(lambda r: 0.0, [short])


def test_open_loop_metrics_nested_monotone(small_model, small_corpus):
    p = small_corpus.pairs[3]
    s = derive_states(p)
    rolls = open_loop_rollout(small_model, p, InferenceConfig(), K=15, seed=2)
    prev = None
    for k in (1, 6, 15):
        if all(r.crashed for r in rolls[:k]):
            continue
        m = open_loop_metrics(rolls[:k], p.x_f, p.v_f, s.d)
        if prev is not None:
            assert all(m[key] <= prev[key] for key in m)
        prev = m


def test_fair_filter_rules():
    ok, bad = roll([0.0, 1.0]), roll([0.0], crashed=True)
    ids = ["p", "q"]
    clean = {"idm": {"p": [ok], "q": [ok]}, "mccf-stoch": {"p": [ok, ok], "q": [ok]}}
    assert fair_filter(ids, clean) == ids
    det_crash = {"idm": {"p": [bad], "q": [ok]}, "mccf-stoch": {"p": [ok], "q": [ok]}}
    assert fair_filter(ids, det_crash) == ["q"]
    stoch_one_ok = {"idm": {"p": [ok], "q": [ok]}, "mccf-stoch": {"p": [bad, bad, ok], "q": [bad]}}
    assert fair_filter(ids, stoch_one_ok) == ["p"]


def test_overlap_rate():
    assert overlap_rate([roll([0.0])] * 5) == 0.0
    assert overlap_rate([roll([0.0], crashed=True)] * 3 + [roll([0.0])] * 97) == pytest.approx(0.03)


class FixedChain:
    """Stand-in model: identity assignment over integer-coded states."""

    def __init__(self, P):
        P = np.asarray(P, float)
        src, dst, w = [], [], []
        for i, row in enumerate(P):
            for j, p in enumerate(row):
                if p > 0:
                    k = int(round(p * 1000))
                    src += [i] * k
                    dst += [j] * k
        self.transitions = TransitionMatrix.from_counts(len(P), src, dst)

    def assign(self, pts):
        return np.asarray(pts, float)[:, 0].astype(int)


def states(*ids):
    return np.array([[i, 0.0, 0.0] for i in ids])


def test_geom_mean_prob_examples():
    sure = FixedChain([[0, 1], [1, 0]])
    assert geom_mean_prob(sure, states(0, 1, 0, 1)) == pytest.approx(1.0)
    half = FixedChain([[0.5, 0.5], [0.5, 0.5]])
    assert geom_mean_prob(half, states(0, 1, 1)) == pytest.approx(0.5)
    mixed = FixedChain([[0, 1.0, 0], [0, 1.0, 0], [0, 0, 1]])
    quarter = FixedChain([[0, 1.0, 0], [0, 0.75, 0.25], [0, 0, 1]])
    assert geom_mean_prob(quarter, states(0, 1, 2)) == pytest.approx(0.5)
    # T = 2: exactly the single transition probability
    assert geom_mean_prob(quarter, states(1, 2)) == pytest.approx(0.25)
    # unseen transition hits the epsilon floor
    assert geom_mean_prob(mixed, states(0, 2)) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        geom_mean_prob(half, states(0))


def test_geom_mean_prob_range(small_model, small_corpus):
    for p in small_corpus.pairs[:5]:
        g = geom_mean_prob(small_model, derive_states(p))
        assert 0 < g <= 1


def test_mann_whitney_examples():
    r = mann_whitney([1, 2, 3], [4, 5, 6])
    assert r.statistic == 0 and r.u_other == 9
    same = mann_whitney([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
    assert same.statistic == 8 and same.pvalue == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mann_whitney([1.0], [2.0, 3.0])


@settings(max_examples=60, deadline=None)
@given(a=st.lists(st.integers(0, 5), min_size=2, max_size=30), b=st.lists(st.integers(0, 5), min_size=2, max_size=30))
def test_mann_whitney_u_sum(a, b):
    r = mann_whitney(a, b)
    assert r.statistic + r.u_other == pytest.approx(len(a) * len(b))
    assert 0 <= r.pvalue <= 1


def test_mann_whitney_matches_scipy():
    from scipy.stats import mannwhitneyu
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 20, 300), rng.integers(2, 22, 250)
    ref = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    r = mann_whitney(a, b)
    assert r.statistic == ref.statistic and r.pvalue == pytest.approx(ref.pvalue, rel=1e-9)


def test_mann_whitney_null_calibration():
    hits = 0
    for rep in range(100):
        rng = np.random.default_rng(1000 + rep)
        hits += mann_whitney(rng.normal(size=5000), rng.normal(size=5000)).pvalue > 0.1
    assert hits >= 85


def test_reports_and_tables(small_model, small_corpus):
    truth = [derive_states(p) for p in small_corpus.pairs[:6]]
    gen = [open_loop_rollout(small_model, p, InferenceConfig(), K=1, seed=i)[0].states
           for i, p in enumerate(small_corpus.pairs[:6])]
    gen = [g for g in gen if len(g.v) >= 2]
    rep = prob_report(small_model, truth, {"MC-CF (stoch)": gen})
    text = format_prob_table(rep)
    assert text.splitlines()[0].split()[:3] == ["Model", "Test", "Statistic"]
    assert "Ground Truth" in text and "MC-CF (stoch)" in text
    ev = EvalReport({"idm": {"rmse_v": 0.5, "min_ade": float("nan")}}, {"idm": 3}, k=1)
    table = format_table(ev)
    assert "0.500" in table and " -" in table
    assert ev.to_dict()["counts"] == {"idm": 3}
