"""MC-CF inference, kinematic stepping and trajectory rollouts.

The rollout helpers are model-agnostic: anything with an
``accel(v, dv, d, v_lead, a_lead, rng)`` method works, which covers the
parametric baselines and :class:`MCCFFollower`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .state_space import ClusterModel
from .trajdata import DT, CFState, Dataset, TrajectoryPair, derive_states

GHOST_SPACING_URBAN = 45.0
GHOST_SPACING_EXTENDED = 150.0


class Follower(Protocol):
    name: str
    stochastic: bool

    def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None): ...


@dataclass
class InferenceConfig:
    mode: str = "stochastic"
    conservative: bool = False
    ttc_tight: float = 3.0
    ttc_loose: float = 10.0
    pct_tight: float = 5.0
    pct_loose: float = 30.0
    seed: int = 0
    dt: float = DT

    def __post_init__(self) -> None:
        if self.mode not in ("deterministic", "stochastic"):
            raise ValueError(f"mode must be 'deterministic' or 'stochastic', got {self.mode!r}")
        if not self.ttc_tight < self.ttc_loose:
            raise ValueError("ttc_tight must be below ttc_loose")
        for pct in (self.pct_tight, self.pct_loose):
            if not 0 < pct <= 100:
                raise ValueError("percentiles must lie in (0, 100]")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


class MCCFFollower:
    """Vectorised MC-CF policy over a trained :class:`ClusterModel`."""

    def __init__(self, model: ClusterModel, cfg: InferenceConfig | None = None):
        if model.transitions is None:
            raise ValueError("model has no transition matrix")
        self.model = model
        self.cfg = cfg or InferenceConfig()
        self.stochastic = self.cfg.mode == "stochastic"
        self.name = "mccf-stoch" if self.stochastic else "mccf-det"
        self._argmax: np.ndarray | None = None

    def _successor_argmax(self) -> np.ndarray:
        if self._argmax is None:
            self._argmax = self.model.transitions.most_likely(np.arange(self.model.n_clusters))
        return self._argmax

    def allowed_pool_sizes(self, nxt: np.ndarray, dv, d) -> np.ndarray:
        """Pool prefix length usable per draw (the full pool unless conservative gating applies)."""
        m = self.model
        sizes = np.diff(m.pool_ptr)[nxt]
        if not self.cfg.conservative:
            return sizes
        dv = np.broadcast_to(np.asarray(dv, float), nxt.shape)
        d = np.broadcast_to(np.asarray(d, float), nxt.shape)
        closing = dv > 0
        ttc = np.full(nxt.shape, np.inf)
        ttc[closing] = d[closing] / dv[closing]
        tight = ttc < self.cfg.ttc_tight
        loose = ~tight & (ttc < self.cfg.ttc_loose)
        out = sizes.copy()
        out[tight] = m.restricted_sizes(self.cfg.pct_tight)[nxt[tight]]
        out[loose] = m.restricted_sizes(self.cfg.pct_loose)[nxt[loose]]
        return out

    def predict(self, v, dv, d, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Next cluster and acceleration for each state (arrays of equal shape)."""
        v, dv, d = np.broadcast_arrays(*(np.atleast_1d(np.asarray(x, float)) for x in (v, dv, d)))
        points = np.column_stack([dv.ravel(), d.ravel(), v.ravel()])
        m = self.model
        cur = m.assign(points)
        if not self.stochastic:
            nxt = self._successor_argmax()[cur]
            return nxt.reshape(v.shape), m.pool_means[nxt].reshape(v.shape)
        if rng is None:
            raise ValueError("stochastic inference needs an rng")
        nxt = m.transitions.sample(cur, rng.random(len(cur)))
        allowed = self.allowed_pool_sizes(nxt, dv.ravel(), d.ravel())
        pick = np.floor(rng.random(len(nxt)) * allowed).astype(np.int64)
        acc = m.pool_vals[m.pool_ptr[nxt] + pick]
        return nxt.reshape(v.shape), acc.reshape(v.shape)

    def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None):
        scalar = np.ndim(v) == 0 and np.ndim(dv) == 0 and np.ndim(d) == 0
        a = self.predict(v, dv, d, rng)[1]
        return float(a[0]) if scalar else a


def predict_det(model: ClusterModel, s: CFState) -> tuple[int, float]:
    """Most probable next cluster (lowest id on ties) and its mean pool acceleration."""
    nxt, acc = MCCFFollower(model, InferenceConfig(mode="deterministic")).predict(s.v, s.dv, s.d)
    return int(nxt[0]), float(acc[0])


def predict_stoch(model: ClusterModel, s: CFState, cfg: InferenceConfig,
                  rng: np.random.Generator) -> tuple[int, float]:
    """Sampled next cluster and an acceleration drawn from its (possibly restricted) pool."""
    cfg = replace(cfg, mode="stochastic")
    nxt, acc = MCCFFollower(model, cfg).predict(s.v, s.dv, s.d, rng)
    return int(nxt[0]), float(acc[0])


def kinematic_step(s: CFState, x_f: float, accel: float, leader_next: tuple[float, float],
                   l: float, dt: float = DT) -> tuple[CFState, float]:
    """Advance the follower one step: speed clamped at 0, trapezoidal position update."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x_l, v_l = leader_next
    v_new = np.maximum(s.v + accel * dt, 0.0)
    x_new = x_f + 0.5 * (s.v + v_new) * dt
    return CFState(v=v_new, dv=v_new - v_l, d=x_l - x_new - l), x_new


@dataclass
class Rollout:
    positions: np.ndarray
    speeds: np.ndarray
    accels: np.ndarray
    spacings: np.ndarray
    lead_speeds: np.ndarray
    crashed: bool = False
    crash_index: int | None = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def states(self) -> CFState:
        return CFState(self.speeds, self.speeds - self.lead_speeds, self.spacings)


@dataclass
class OneStepResult:
    """Predictions for steps 1..T-1 (spacing, speed) and accelerations for 0..T-2."""

    d: np.ndarray
    v: np.ndarray
    a: np.ndarray
    truth_d: np.ndarray = field(repr=False, default=None)
    truth_v: np.ndarray = field(repr=False, default=None)
    truth_a: np.ndarray = field(repr=False, default=None)


def _as_follower(model, cfg: InferenceConfig | None) -> Follower:
    if isinstance(model, ClusterModel):
        return MCCFFollower(model, cfg)
    return model


def one_step_predict(model, pair: TrajectoryPair, cfg: InferenceConfig | None = None,
                     rng: np.random.Generator | None = None) -> OneStepResult:
    """Reset to the observed state at every step, predict one step ahead."""
    follower = _as_follower(model, cfg)
    dt = cfg.dt if cfg is not None else DT
    if rng is None:
        rng = np.random.default_rng(cfg.seed if cfg is not None else 0)
    s = derive_states(pair)
    n = len(pair) - 1
    acc = np.asarray(follower.accel(s.v[:n], s.dv[:n], s.d[:n], pair.v_l[:n], pair.a_l[:n], rng), float)
    nxt, _ = kinematic_step(CFState(s.v[:n], s.dv[:n], s.d[:n]), pair.x_f[:n], acc,
                            (pair.x_l[1:], pair.v_l[1:]), pair.length_avg, dt)
    return OneStepResult(d=nxt.d, v=nxt.v, a=acc, truth_d=s.d[1:], truth_v=s.v[1:], truth_a=pair.a_f[:n])


def simulate_pair(follower: Follower, pair: TrajectoryPair, rng: np.random.Generator | None,
                  dt: float = DT) -> Rollout:
    """Open-loop rollout against the recorded leader; truncates at the first d <= 0."""
    n = len(pair)
    l = pair.length_avg
    x = np.empty(n)
    v = np.empty(n)
    a = np.zeros(n)
    d = np.empty(n)
    x[0], v[0] = pair.x_f[0], pair.v_f[0]
    d[0] = pair.x_l[0] - x[0] - l
    end = n
    crashed = d[0] <= 0
    crash_index = 0 if crashed else None
    if crashed:
        end = 1
    else:
        for t in range(n - 1):
            a[t] = float(np.asarray(follower.accel(v[t], v[t] - pair.v_l[t], d[t],
                                                   pair.v_l[t], pair.a_l[t], rng)).ravel()[0])
            v[t + 1] = max(v[t] + a[t] * dt, 0.0)
            x[t + 1] = x[t] + 0.5 * (v[t] + v[t + 1]) * dt
            d[t + 1] = pair.x_l[t + 1] - x[t + 1] - l
            if d[t + 1] <= 0:
                crashed, crash_index, end = True, t + 1, t + 2
                break
        if end > 1:
            a[end - 1] = a[end - 2]
    return Rollout(x[:end], v[:end], a[:end], d[:end], np.asarray(pair.v_l[:end], float),
                   crashed, crash_index)


def rollout_rngs(seed, k: int) -> list[np.random.Generator]:
    """One independent generator per rollout."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def open_loop_rollout(model, pair: TrajectoryPair, cfg: InferenceConfig | None = None,
                      K: int = 1, seed=None) -> list[Rollout]:
    """``K`` recursive rollouts from the true initial follower state.

    Deterministic followers are simulated once and the result is repeated.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    follower = _as_follower(model, cfg)
    dt = cfg.dt if cfg is not None else DT
    if seed is None:
        seed = cfg.seed if cfg is not None else 0
    if not getattr(follower, "stochastic", False):
        one = simulate_pair(follower, pair, None, dt)
        return [one] * K
    return [simulate_pair(follower, pair, rng, dt) for rng in rollout_rngs(seed, K)]


def write_rollouts_csv(rollouts: Sequence[Rollout], path: str | Path, t0: float = 0.0,
                       dt: float = DT) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rollout_id", "t", "x_f", "v_f", "a_f", "d", "crashed"])
        for k, r in enumerate(rollouts):
            for i in range(len(r)):
                w.writerow([k, repr(round(t0 + i * dt, 10)), repr(float(r.positions[i])),
                            repr(float(r.speeds[i])), repr(float(r.accels[i])),
                            repr(float(r.spacings[i])), int(r.crashed)])


def augment_solo(ds: Dataset, ghost_spacing: float = GHOST_SPACING_URBAN) -> Dataset:
    """Attach a ghost leader (dv = 0, d = ghost_spacing) to leaderless or far-leader points."""
    out = []
    for pair in ds.pairs:
        with np.errstate(invalid="ignore"):
            mask = np.isnan(pair.x_l) | np.isnan(pair.v_l) | (pair.spacing > ghost_spacing)
        if not mask.any():
            out.append(pair)
            continue
        x_l, v_l, a_l = pair.x_l.copy(), pair.v_l.copy(), pair.a_l.copy()
        x_l[mask] = pair.x_f[mask] + pair.length_avg + ghost_spacing
        v_l[mask] = pair.v_f[mask]
        a_l[mask] = pair.a_f[mask]
        out.append(replace(pair, x_l=x_l, v_l=v_l, a_l=a_l))
    return Dataset(out, ds.split_tag)
