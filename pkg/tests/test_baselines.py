from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mccf.baselines import (FVDMParams, GippsParams, IDMParams, SIDMParams, VanAremParams, clamp_accel,
                            fvdm_accel, fvdm_desired_speed, gipps_next_speed, idm_accel,
                            idm_equilibrium_gap, make_params, params_from_config, sidm_accel,
                            van_arem_accel)
from mccf.trajdata import CFState


def test_idm_standstill_equilibrium():
    p = IDMParams()
    assert idm_accel(p, CFState(0.0, 0.0, p.s0)) == 0.0


def test_idm_free_flow_equilibrium():
    p = IDMParams()
    assert abs(idm_accel(p, CFState(p.v0, 0.0, 1e12))) < 1e-9


def test_idm_half_speed_closed_form():
    p = IDMParams()
    assert idm_accel(p, CFState(p.v0 / 2, 0.0, 1e12)) == pytest.approx(p.a_max * (1 - 1 / 16), abs=1e-9)


def test_idm_equilibrium_gap_zero_accel():
    p = IDMParams()
    for v in (1.0, 5.0, 12.0):
        assert abs(idm_accel(p, CFState(v, 0.0, idm_equilibrium_gap(p, v)))) < 1e-9


def test_nonpositive_spacing_max_brake():
    for p in (IDMParams(), FVDMParams(), VanAremParams(), GippsParams()):
        assert p.accel(5.0, 0.0, 0.0, v_lead=5.0, a_lead=0.0) == -10.0
        assert p.accel(5.0, 0.0, -2.0, v_lead=5.0, a_lead=0.0) == -10.0


@pytest.mark.parametrize("raw,want", [(-12.0, -10.0), (7.0, 5.0), (0.0, 0.0)])
def test_clamp(raw, want):
    assert clamp_accel(raw) == want


def test_sidm_zero_noise_is_idm():
    rng = np.random.default_rng(0)
    v, dv, d = rng.uniform(0, 20, 200), rng.uniform(-5, 5, 200), rng.uniform(1, 60, 200)
    s = CFState(v, dv, d)
    idm = idm_accel(IDMParams(), s)
    np.testing.assert_array_equal(sidm_accel(SIDMParams(sigma=0.0), s, rng), idm)


def test_sidm_reproducible():
    s = CFState(5.0, 0.0, 20.0)
    a = [sidm_accel(SIDMParams(), s, np.random.default_rng(3)) for _ in range(2)]
    assert a[0] == a[1]
    with pytest.raises(ValueError):
        sidm_accel(SIDMParams(), s)


def test_sidm_clt_mean():
    p = SIDMParams(sigma=0.5)
    v = 8.0
    d = idm_equilibrium_gap(p.idm, v)
    s = CFState(np.full(10_000, v), np.zeros(10_000), np.full(10_000, d))
    draws = sidm_accel(p, s, np.random.default_rng(42))
    assert abs(draws.mean() - idm_accel(p.idm, CFState(v, 0.0, d))) < 3 * p.sigma / 100


def test_van_arem_double_equilibrium():
    p = VanAremParams()
    v = p.v_int
    d_ref = max(p.t_system * v, p.r_min)
    assert van_arem_accel(p, CFState(v, 0.0, d_ref), 0.0) == 0.0


def test_van_arem_reference_distance_collapse():
    p = VanAremParams(k=0.0)  # isolate the spacing demand
    v = 4.0
    # dv = 0 -> d_ref = max(r_system, r_min); spacing 1 m above it gives k_d
    d_ref = max(p.t_system * v, p.r_min)
    assert van_arem_accel(p, CFState(v, 0.0, d_ref + 1.0), 0.0) == pytest.approx(min(0.0, p.k_d))
    p = VanAremParams(k=10.0)
    assert van_arem_accel(p, CFState(0.0, 0.0, p.r_min + 1.0), 0.0) == pytest.approx(p.k_d)


@pytest.mark.parametrize("profile", ["cth", "sigmoid"])
def test_fvdm_boundary_and_equilibrium(profile):
    p = FVDMParams(profile=profile)
    assert fvdm_desired_speed(p, p.s0) == 0.0
    for d in (5.0, 10.0, 30.0):
        v = float(fvdm_desired_speed(p, d))
        assert abs(fvdm_accel(p, CFState(v, 0.0, d))) < 1e-9


def test_fvdm_sigmoid_midpoint_and_continuity():
    p = FVDMParams(profile="sigmoid")
    mid = p.s0 + p.T * p.V_max / 2
    assert fvdm_desired_speed(p, mid) == pytest.approx(p.V_max / 2, abs=1e-12)
    top = p.s0 + p.T * p.V_max
    for x in (p.s0, top):
        lo, hi = np.nextafter(x, -np.inf), np.nextafter(x, np.inf)
        assert abs(float(fvdm_desired_speed(p, lo)) - float(fvdm_desired_speed(p, hi))) < 1e-12


def test_fvdm_unknown_profile():
    with pytest.raises(ValueError):
        fvdm_desired_speed(FVDMParams(profile="step"), 3.0)


def test_gipps_free_flow_term_at_vmax():
    p = GippsParams()
    assert gipps_next_speed(p, CFState(p.V_max, 0.0, 1e6), p.V_max) == pytest.approx(p.V_max)


def test_gipps_standstill():
    p = GippsParams()
    assert gipps_next_speed(p, CFState(0.0, 0.0, p.s0), 0.0) == 0.0


def test_gipps_branch_selection():
    p = GippsParams()
    v = 5.0
    ratio = v / p.V_max
    free = v + 2.5 * p.a_max * p.tau * (1 - ratio) * np.sqrt(0.025 + ratio)
    lag = p.tau / 2 + p.theta
    far = gipps_next_speed(p, CFState(v, -20.0, 500.0), 25.0)
    brake_far = -p.b * lag + np.sqrt(p.b ** 2 * lag ** 2 + p.b * (2 * (500 - p.s0) - p.tau * v + 25 ** 2 / p.b_hat))
    assert brake_far > free and far == pytest.approx(free)
    near = gipps_next_speed(p, CFState(v, 5.0, 6.0), 0.0)
    brake_near = -p.b * lag + np.sqrt(p.b ** 2 * lag ** 2 + p.b * (2 * (6 - p.s0) - p.tau * v))
    assert brake_near < free and near == pytest.approx(brake_near)


def test_gipps_negative_radicand_stops():
    p = GippsParams()
    assert gipps_next_speed(p, CFState(20.0, 20.0, 0.5), 0.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(d=st.floats(3, 200), v_lead=st.floats(0, 20))
def test_gipps_monotone_in_spacing(d, v_lead):
    p = GippsParams()
    a = gipps_next_speed(p, CFState(8.0, 0.0, d), v_lead)
    b = gipps_next_speed(p, CFState(8.0, 0.0, d + 1.0), v_lead)
    assert b >= a - 1e-12


@settings(max_examples=100, deadline=None)
@given(v=st.floats(0, 40), dv=st.floats(-20, 20), d=st.floats(-5, 200))
def test_outputs_within_practical_range(v, dv, d):
    for p in (IDMParams(), FVDMParams(), FVDMParams(profile="sigmoid"), VanAremParams(), GippsParams()):
        a = p.accel(v, dv, d, v_lead=max(v - dv, 0.0), a_lead=0.0)
        assert -10.0 <= a <= 5.0


def test_vector_and_config_round_trip():
    for name in ("idm", "sidm", "vanarem", "fvdm-cth", "fvdm-sigmoid", "gipps"):
        p = make_params(name, np.arange(1, 10, dtype=float)[:len(make_params(name, np.ones(9)).names())])
        assert params_from_config(p.to_config()) == p
        np.testing.assert_array_equal(make_params(name, p.to_vector()).to_vector(), p.to_vector())
    with pytest.raises(KeyError):
        make_params("ovm", [1.0])


def test_broadcast_over_population():
    X = np.array([[15.0, 1.0, 1.0, 1.5, 2.0, 4.0], [20.0, 1.5, 1.2, 2.0, 2.5, 4.0]])
    p = make_params("idm", X)
    v = np.array([[5.0, 6.0, 7.0]])
    a = idm_accel(p, CFState(v, np.zeros_like(v), np.full_like(v, 20.0)))
    assert a.shape == (2, 3)
    assert a[1, 2] == pytest.approx(idm_accel(make_params("idm", X[1]), CFState(7.0, 0.0, 20.0)))
