from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mccf.inference import (GHOST_SPACING_EXTENDED, InferenceConfig, MCCFFollower, augment_solo,
                            kinematic_step, one_step_predict, open_loop_rollout, predict_det,
                            predict_stoch, write_rollouts_csv)
from mccf.metrics import rmse_one_step
from mccf.state_space import URBAN_RANGES, ClusterModel, StateGrid, TransitionMatrix, train_clusters
from mccf.synthetic import points_dataset
from mccf.trajdata import CFState, Dataset, derive_states

from conftest import make_pair

GRID = StateGrid(URBAN_RANGES, (5.0, 15.0, 5.0), (4, 3, 4))


def hand_model(pools, src, dst, centroids=None):
    """Clusters i = 0..n-1 placed in distinct bins; transitions from (src, dst) lists."""
    n = len(pools)
    if centroids is None:
        centroids = np.array([[-7.5 + 5 * i, 7.5, 2.5] for i in range(n)])
    centroids = np.asarray(centroids, float)
    keys = GRID.flat_index(GRID.bin_indices(centroids))
    order = np.argsort(keys)
    sorted_pools = [np.sort(np.asarray(p, float)) for p in pools]
    ptr = np.concatenate([[0], np.cumsum([len(p) for p in sorted_pools])])
    return ClusterModel(GRID, np.array([max(10, len(p)) for p in pools]), centroids,
                        GRID.normalize(centroids), ptr, np.concatenate(sorted_pools),
                        keys[order], np.arange(n)[order], TransitionMatrix.from_counts(n, src, dst))


def state_of(model, cid):
    c = model.centroids[cid]
    return CFState(v=c[2], dv=c[0], d=c[1])


def test_predict_det_argmax_and_pool_mean():
    m = hand_model([[0.0], [0.1, 0.2, 0.3], [-1.0]], [0] * 10, [1] * 7 + [2] * 3)
    assert predict_det(m, state_of(m, 0)) == (1, pytest.approx(0.2))


def test_predict_det_tie_goes_to_lower_id():
    m = hand_model([[0.0], [0.5], [-0.5]], [0, 0], [2, 1])
    assert predict_det(m, state_of(m, 0))[0] == 1


def test_predict_det_empty_row_self_loop():
    m = hand_model([[0.4], [0.5]], [0], [1])
    assert predict_det(m, state_of(m, 1)) == (1, pytest.approx(0.5))


def test_constant_acceleration_pair_trains_self_loop():
    pts = np.array([[0.0, 10.0, 5.0], [0.1, 10.0, 5.1], [0.2, 10.0, 5.2]])
    ds = points_dataset(pts, np.ones(3))
    m = train_clusters(ds, GRID, n_min=3)
    assert m.n_clusters == 1
    assert predict_det(m, CFState(v=5.0, dv=0.0, d=10.0)) == (0, 1.0)


def test_conservative_ttc_tight_restricts_pool():
    pool = np.linspace(-3, 2, 101)
    m = hand_model([pool, pool], [0, 0, 1], [0, 1, 1])
    cfg = InferenceConfig(conservative=True)
    q5 = np.percentile(pool, 5)
    rng = np.random.default_rng(0)
    s = CFState(v=2.5, dv=3.0, d=6.0)  # TTC = 2 s
    draws = [predict_stoch(m, s, cfg, rng)[1] for _ in range(300)]
    assert max(draws) <= q5
    s_far = CFState(v=2.5, dv=-1.0, d=6.0)  # opening gap: full pool
    draws = [predict_stoch(m, s_far, cfg, rng)[1] for _ in range(300)]
    assert max(draws) > np.percentile(pool, 30)


def test_conservative_loose_band_uses_30th_percentile():
    pool = np.linspace(-3, 2, 101)
    m = hand_model([pool], [0], [0])
    f = MCCFFollower(m, InferenceConfig(conservative=True))
    _, acc = f.predict(np.full(2000, 2.5), np.full(2000, 1.0), np.full(2000, 5.0), np.random.default_rng(1))
    assert acc.max() <= np.percentile(pool, 30)
    assert acc.max() > np.percentile(pool, 5)


def test_single_sample_pool():
    m = hand_model([[0.5]], [0], [0])
    rng = np.random.default_rng(0)
    for cons in (False, True):
        cfg = InferenceConfig(conservative=cons)
        assert {predict_stoch(m, CFState(2.0, 3.0, 1.0), cfg, rng)[1] for _ in range(20)} == {0.5}


@settings(max_examples=60, deadline=None)
@given(v=st.floats(0, 20), dv=st.floats(0.01, 10), d=st.floats(0.01, 45), seed=st.integers(0, 2**31))
def test_conservative_draw_below_pool_percentile(regime_model, v, dv, d, seed):
    f = MCCFFollower(regime_model, InferenceConfig(conservative=True))
    nxt, acc = f.predict(v, dv, d, np.random.default_rng(seed))
    pool = regime_model.pool(int(nxt[0]))
    ttc = d / dv
    if ttc < 3:
        assert acc[0] <= np.percentile(pool, 5)
    elif ttc < 10:
        assert acc[0] <= np.percentile(pool, 30)
    assert acc[0] in pool


def test_kinematic_step_examples():
    s = CFState(v=5.0, dv=0.0, d=10.0)
    nxt, x = kinematic_step(s, 0.0, 1.0, (20.0, 5.0), 5.0, 0.1)
    assert nxt.v == pytest.approx(5.1) and x == pytest.approx(0.505)
    nxt, x = kinematic_step(CFState(0.05, 0.0, 10.0), 0.0, -1.0, (20.0, 0.0), 5.0, 0.1)
    assert nxt.v == 0.0 and x == pytest.approx(0.0025)
    nxt, x = kinematic_step(CFState(7.0, 0.0, 10.0), 1.0, 0.0, (20.0, 7.0), 5.0, 0.1)
    assert nxt.v == 7.0 and x == pytest.approx(1.7)
    assert nxt.d == pytest.approx(20.0 - 1.7 - 5.0)


@settings(max_examples=100, deadline=None)
@given(v=st.floats(0, 40), a=st.floats(-10, 5))
def test_kinematic_step_properties(v, a):
    nxt, x = kinematic_step(CFState(v, 0.0, 10.0), 3.0, a, (50.0, v), 5.0, 0.1)
    assert nxt.v >= 0
    assert x - 3.0 == pytest.approx(0.5 * (v + nxt.v) * 0.1, abs=1e-12)


class ZeroModel:
    stochastic = False

    def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None):
        return np.zeros(np.shape(v))


def test_one_step_zero_model_and_horizon():
    p = make_pair(n=50)
    res = one_step_predict(ZeroModel(), p)
    assert len(res.v) == len(p) - 1
    assert rmse_one_step(res.v, res.truth_v) == 0.0


def test_one_step_det_equals_cluster_means(small_model, small_corpus):
    p = small_corpus.pairs[0]
    res = one_step_predict(small_model, p, InferenceConfig(mode="deterministic"))
    s = derive_states(p)
    cur = small_model.assign(np.column_stack([s.dv, s.d, s.v])[:-1])
    nxt = small_model.transitions.most_likely(cur)
    np.testing.assert_array_equal(res.a, small_model.pool_means[nxt])


def test_rollout_determinism(small_model, small_corpus):
    p = small_corpus.pairs[1]
    det = open_loop_rollout(small_model, p, InferenceConfig(mode="deterministic"), K=3)
    assert len(det) == 3
    for r in det[1:]:
        np.testing.assert_array_equal(r.positions, det[0].positions)
    a = open_loop_rollout(small_model, p, InferenceConfig(), K=4, seed=9)
    b = open_loop_rollout(small_model, p, InferenceConfig(), K=4, seed=9)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.speeds, rb.speeds)
    # nested prefix: the first rollouts do not depend on K
    c = open_loop_rollout(small_model, p, InferenceConfig(), K=2, seed=9)
    np.testing.assert_array_equal(c[1].speeds, a[1].speeds)


def test_rollout_accels_come_from_pools(small_model, small_corpus):
    allowed = set(small_model.pool_vals.tolist())
    for r in open_loop_rollout(small_model, small_corpus.pairs[2], InferenceConfig(conservative=True), K=3):
        n = len(r) - 1
        assert set(r.accels[:n].tolist()) <= allowed
        assert np.all(r.speeds >= 0)


def test_free_flow_rollout_accelerates():
    rng = np.random.default_rng(0)
    n = 400
    pts = np.column_stack([rng.uniform(-10, 10, n), rng.uniform(40, 45, n), rng.uniform(0, 20, n)])
    m = train_clusters(points_dataset(pts, rng.uniform(0.9, 1.1, n)), GRID, n_min=10)
    from mccf.state_space import estimate_transitions
    p = make_pair(n=150, v_f=0.0, v_l=0.0, gap=1e4)
    r = open_loop_rollout(m, p, InferenceConfig(), K=1, seed=1)[0]
    assert np.all(np.diff(r.speeds) > 0)


def test_rollout_truncates_at_crash():
    class Floor:
        stochastic = False

        def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None):
            return 5.0

    p = make_pair(n=200, v_f=5.0, v_l=5.0, gap=3.0)
    r = open_loop_rollout(Floor(), p, K=1)[0]
    assert r.crashed and r.crash_index == len(r) - 1
    assert r.spacings[-1] <= 0 < r.spacings[-2]


def test_write_rollouts_csv(tmp_path, small_model, small_corpus):
    rs = open_loop_rollout(small_model, small_corpus.pairs[0], InferenceConfig(), K=2)
    path = tmp_path / "r.csv"
    write_rollouts_csv(rs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "rollout_id,t,x_f,v_f,a_f,d,crashed"
    assert len(lines) == 1 + sum(len(r) for r in rs)


def test_augment_solo():
    p = make_pair("solo", n=5, v_f=12.0)
    p.x_l[:] = np.nan
    p.v_l[:] = np.nan
    out = augment_solo(Dataset([p]))
    s = derive_states(out.pairs[0])
    assert (s.v[0], s.dv[0], s.d[0]) == (12.0, 0.0, pytest.approx(45.0))
    ext = derive_states(augment_solo(Dataset([p]), GHOST_SPACING_EXTENDED).pairs[0])
    assert ext.d[0] == pytest.approx(150.0)
    plain = Dataset([make_pair("cf", n=5)])
    assert augment_solo(plain).pairs[0] is plain.pairs[0]
    assert len(augment_solo(Dataset())) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(mode="greedy")
    with pytest.raises(ValueError):
        InferenceConfig(ttc_tight=10, ttc_loose=3)
