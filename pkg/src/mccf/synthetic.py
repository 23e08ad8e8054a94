"""Synthetic leader/follower corpora for testing and demos.

Followers are integrated with the same kinematics used everywhere else
(speed clamped at zero, trapezoidal positions), and the recorded ``a_f`` is
the acceleration actually applied, so replaying it reproduces the series.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .baselines import IDMParams, idm_accel, idm_equilibrium_gap
from .trajdata import DT, DEFAULT_VEHICLE_LENGTH, CFState, Dataset, TrajectoryPair

AccelFn = Callable[[float, float, float, np.random.Generator], float]


def leader_profile(n_steps: int, rng: np.random.Generator, dt: float = DT, v_init: float | None = None,
                   v_max: float = 15.0, accel_scale: float = 1.2,
                   segment: tuple[float, float] = (2.0, 8.0)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Piecewise-constant acceleration leader: returns (x, v, a) with x[0] = 0."""
    v = np.empty(n_steps)
    a = np.zeros(n_steps)
    v[0] = rng.uniform(0.3, 0.8) * v_max if v_init is None else v_init
    cur, left = 0.0, 0
    for t in range(n_steps - 1):
        if left <= 0:
            cur = rng.uniform(-accel_scale, accel_scale)
            left = int(rng.uniform(*segment) / dt)
        left -= 1
        v[t + 1] = min(max(v[t] + cur * dt, 0.0), v_max)
        a[t] = (v[t + 1] - v[t]) / dt
    a[-1] = a[-2] if n_steps > 1 else 0.0
    x = np.concatenate([[0.0], np.cumsum(0.5 * (v[:-1] + v[1:]) * dt)])
    return x, v, a


def follow(x_l: np.ndarray, v_l: np.ndarray, accel_fn: AccelFn, x0: float, v0: float,
           rng: np.random.Generator, l: float = DEFAULT_VEHICLE_LENGTH,
           dt: float = DT) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integrate a follower behind a recorded leader; returns (x, v, applied a)."""
    n = len(x_l)
    x, v, a = np.empty(n), np.empty(n), np.zeros(n)
    x[0], v[0] = x0, v0
    for t in range(n - 1):
        d = x_l[t] - x[t] - l
        want = float(accel_fn(v[t], v[t] - v_l[t], d, rng))
        v[t + 1] = max(v[t] + want * dt, 0.0)
        a[t] = (v[t + 1] - v[t]) / dt
        x[t + 1] = x[t] + 0.5 * (v[t] + v[t + 1]) * dt
    a[-1] = a[-2] if n > 1 else 0.0
    return x, v, a


def _make_pair(pair_id: str, x_l, v_l, a_l, x_f, v_f, a_f, l: float, dt: float) -> TrajectoryPair:
    t = np.arange(len(x_l)) * dt
    return TrajectoryPair(pair_id, t, x_f, v_f, a_f, x_l, v_l, a_l, l)


def synthetic_pair(pair_id: str, accel_fn: AccelFn, rng: np.random.Generator, n_steps: int = 300,
                   params: IDMParams | None = None, l: float = DEFAULT_VEHICLE_LENGTH, dt: float = DT,
                   max_tries: int = 50, **leader_kw) -> TrajectoryPair:
    """One pair whose follower starts near the IDM equilibrium gap; retries until no contact occurs."""
    params = params or IDMParams()
    for _ in range(max_tries):
        x_l, v_l, a_l = leader_profile(n_steps, rng, dt, **leader_kw)
        v0 = float(v_l[0] * rng.uniform(0.85, 1.15))
        gap = idm_equilibrium_gap(params, v0)
        gap = min(gap, 40.0) * rng.uniform(0.9, 1.1)
        x_f, v_f, a_f = follow(x_l + l + gap, v_l, accel_fn, 0.0, v0, rng, l, dt)
        if np.all(x_l + l + gap - x_f - l > 0):
            return _make_pair(pair_id, x_l + l + gap, v_l, a_l, x_f, v_f, a_f, l, dt)
    raise RuntimeError(f"could not generate a collision-free pair for {pair_id}")


def idm_driver(params: IDMParams) -> AccelFn:
    def fn(v, dv, d, rng):
        return idm_accel(params, CFState(v, dv, d))
    return fn


def noisy_idm_driver(params: IDMParams, sigma: float = 0.3, outlier_rate: float = 0.0,
                     outlier_range: tuple[float, float] = (2.0, 4.0)) -> AccelFn:
    """IDM plus white noise; with probability ``outlier_rate`` the driver instead
    floors it with an acceleration drawn from ``outlier_range``."""
    def fn(v, dv, d, rng):
        if outlier_rate > 0 and rng.random() < outlier_rate:
            return rng.uniform(*outlier_range)
        return float(np.clip(idm_accel(params, CFState(v, dv, d)) + sigma * rng.standard_normal(), -10.0, 5.0))
    return fn


def idm_corpus(n_pairs: int, n_steps: int = 100, params: IDMParams | None = None, seed: int = 0,
               prefix: str = "idm", **leader_kw) -> Dataset:
    """Noise-free IDM followers behind random leaders."""
    params = params or IDMParams()
    rng = np.random.default_rng(seed)
    fn = idm_driver(params)
    return Dataset([synthetic_pair(f"{prefix}{i:04d}", fn, rng, n_steps, params, **leader_kw)
                    for i in range(n_pairs)])


def stochastic_corpus(n_pairs: int, n_steps: int = 300, params: IDMParams | None = None, seed: int = 0,
                      sigma: float = 0.3, outlier_rate: float = 0.0,
                      outlier_range: tuple[float, float] = (2.0, 4.0), prefix: str = "sto",
                      **leader_kw) -> Dataset:
    """Noisy IDM drivers, optionally with aggressive acceleration outliers."""
    params = params or IDMParams()
    rng = np.random.default_rng(seed)
    fn = noisy_idm_driver(params, sigma, outlier_rate, outlier_range)
    return Dataset([synthetic_pair(f"{prefix}{i:04d}", fn, rng, n_steps, params, **leader_kw)
                    for i in range(n_pairs)])


def markov_chain_dataset(P: np.ndarray, centres: np.ndarray, n_transitions: int, seed: int = 0,
                         l: float = DEFAULT_VEHICLE_LENGTH, dt: float = DT) -> tuple[Dataset, np.ndarray]:
    """A single series whose (dv, d, v) state hops between ``centres`` following ``P``.

    Returns the dataset and the visited chain-state sequence. The series is
    not kinematically consistent; it only exercises the state-space pipeline.
    """
    P = np.asarray(P, float)
    centres = np.asarray(centres, float)
    rng = np.random.default_rng(seed)
    seq = np.empty(n_transitions + 1, dtype=np.int64)
    seq[0] = rng.integers(len(P))
    cum = np.cumsum(P, axis=1)
    for t in range(n_transitions):
        seq[t + 1] = min(int(np.searchsorted(cum[seq[t]], rng.random(), side="right")), len(P) - 1)
    dv, d, v = centres[seq, 0], centres[seq, 1], centres[seq, 2]
    x_f = np.zeros(len(seq))
    v_l = v - dv
    x_l = x_f + d + l
    a_f = rng.normal(0.0, 0.5, len(seq))
    pair = _make_pair("chain", x_l, v_l, np.zeros(len(seq)), x_f, v, a_f, l, dt)
    return Dataset([pair]), seq


def random_state_points(n: int, seed: int = 0, ranges=((-10.0, 10.0), (0.0, 45.0), (0.0, 20.0)),
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Random (dv, d, v) points with a correlated, heavy-ish structure plus accelerations."""
    rng = np.random.default_rng(seed)
    v = rng.gamma(3.0, 2.5, n)
    d = 2.0 + 1.2 * v + rng.gamma(2.0, 3.0, n)
    dv = rng.standard_t(4, n) * 1.5
    pts = np.column_stack([dv, d, v])
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    pts = np.clip(pts, lo, hi - 1e-9)
    return pts, rng.normal(0.0, 0.8, n)


def points_dataset(points: np.ndarray, accels: np.ndarray, pair_len: int = 100,
                   l: float = DEFAULT_VEHICLE_LENGTH, dt: float = DT) -> Dataset:
    """Pack raw (dv, d, v) rows into pairs of ``pair_len`` states so that
    ``derive_states`` returns exactly those rows."""
    pairs = []
    for k, start in enumerate(range(0, len(points), pair_len)):
        blk = points[start:start + pair_len]
        dv, d, v = blk[:, 0], blk[:, 1], blk[:, 2]
        x_f = np.zeros(len(blk))
        pairs.append(_make_pair(f"pts{k:05d}", x_f + d + l, v - dv, np.zeros(len(blk)), x_f, v,
                                np.asarray(accels[start:start + pair_len], float), l, dt))
    return Dataset(pairs)


def regime_driver(s0: float = 2.0, T: float = 1.2, spread: float = 0.4,
                  means: tuple[float, float, float, float] = (-1.2, -0.6, 0.0, 0.6)) -> AccelFn:
    """A driver whose acceleration law depends only on a coarse regime.

    Regimes: closing fast (dv > 1.5), too close (d < s0 + v T), comfortable,
    and lagging (d > s0 + 2 v T + 5). Each draws from a normal with the given
    mean and ``spread``. Such a driver is a Markov process over coarse states,
    which makes it a fair target for self-consistency checks.
    """
    def fn(v, dv, d, rng):
        desired = s0 + v * T
        if dv > 1.5:
            mu = means[0]
        elif d < desired:
            mu = means[1]
        elif d > desired + v * T + 5.0:
            mu = means[3]
        else:
            mu = means[2]
        return float(np.clip(mu + spread * rng.standard_normal(), -10.0, 5.0))
    return fn


def regime_corpus(n_pairs: int, n_steps: int = 300, seed: int = 0, spread: float = 0.4,
                  means: tuple[float, float, float, float] = (-1.2, -0.6, 0.0, 0.6),
                  prefix: str = "reg", **leader_kw) -> Dataset:
    """Pairs driven by :func:`regime_driver`."""
    rng = np.random.default_rng(seed)
    fn = regime_driver(spread=spread, means=means)
    return Dataset([synthetic_pair(f"{prefix}{i:04d}", fn, rng, n_steps, **leader_kw) for i in range(n_pairs)])
