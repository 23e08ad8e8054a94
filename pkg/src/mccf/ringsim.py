"""Closed-loop single-lane ring road.

Vehicle ``i`` follows vehicle ``(i + 1) % N``. Positions are tracked as
unwrapped odometer readings so that spacing is always measured forward to the
actual leader, even after a collision; reported positions are wrapped to
[0, L).
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import IDMParams, idm_accel
from .trajdata import DT, CFState

logger = logging.getLogger(__name__)

CONTACT_BACKOFF = 0.1


@dataclass
class PerturbationProfile:
    start_time: float = 50.0
    decel: float = 1.0
    decel_duration: float = 5.0
    hold_duration: float = 10.0
    accel: float = 1.0
    accel_duration: float = 5.0
    target_vehicle: int = 0

    def __post_init__(self) -> None:
        if min(self.decel_duration, self.hold_duration, self.accel_duration) < 0:
            raise ValueError("perturbation durations must be non-negative")

    def phase_bounds(self, dt: float) -> tuple[int, int, int, int]:
        """Step indices where the decel, hold and accel phases start, and where control is released."""
        s0 = round(self.start_time / dt)
        s1 = s0 + round(self.decel_duration / dt)
        s2 = s1 + round(self.hold_duration / dt)
        s3 = s2 + round(self.accel_duration / dt)
        return s0, s1, s2, s3

    def override(self, step: int, dt: float) -> float | None:
        """Forced acceleration at ``step`` or None when the model is in control."""
        s0, s1, s2, s3 = self.phase_bounds(dt)
        if s0 <= step < s1:
            return -self.decel
        if s1 <= step < s2:
            return 0.0
        if s2 <= step < s3:
            return self.accel
        return None


STANDARD_PROFILE = PerturbationProfile(50.0, 1.0, 5.0, 10.0, 1.0, 5.0)
SEVERE_PROFILE = PerturbationProfile(50.0, 1.0, 10.0, 30.0, 1.0, 10.0)

SCENARIOS = {
    "normal-equilibrium": {"n_vehicles": 200, "v_start": 5.84, "perturbation": None},
    "standard-shockwave": {"n_vehicles": 200, "v_start": 5.84, "perturbation": STANDARD_PROFILE},
    "severe-shockwave": {"n_vehicles": 200, "v_start": 5.84, "perturbation": SEVERE_PROFILE},
    "high-speed-shockwave": {"n_vehicles": 40, "v_start": 30.0, "perturbation": SEVERE_PROFILE},
}


@dataclass
class RingConfig:
    length: float = 3000.0
    n_vehicles: int = 200
    v_start: float = 5.84
    dt: float = 0.1
    horizon: float = 300.0
    trials: int = 20
    vehicle_length: float = 5.0
    model: object = None
    perturbation: PerturbationProfile | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_vehicles < 1:
            raise ValueError("need at least one vehicle")
        if not self.n_vehicles * self.vehicle_length < self.length:
            raise ValueError("infeasible density: vehicles do not fit on the ring")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


def scenario_config(name: str, model=None, **overrides) -> RingConfig:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    base = dict(SCENARIOS[name])
    if base["perturbation"] is not None:
        base["perturbation"] = replace(base["perturbation"])
    base.update(overrides)
    return RingConfig(model=model, **base)


@dataclass
class RingState:
    odometer: np.ndarray
    speeds: np.ndarray
    accels: np.ndarray
    length: float
    step: int = 0
    in_contact: np.ndarray | None = None
    collisions: list[tuple[float, int]] = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.mod(self.odometer, self.length)

    def headways(self) -> np.ndarray:
        """Front-to-front distance from each vehicle to its leader (sums to L)."""
        x = self.odometer
        h = np.empty_like(x)
        h[:-1] = x[1:] - x[:-1]
        h[-1] = x[0] + self.length - x[-1]
        return h

    def copy(self) -> "RingState":
        return RingState(self.odometer.copy(), self.speeds.copy(), self.accels.copy(), self.length,
                         self.step, None if self.in_contact is None else self.in_contact.copy(),
                         list(self.collisions))


def init_ring(cfg: RingConfig) -> RingState:
    """Uniform placement at headway L/N, everyone at ``v_start``."""
    n = cfg.n_vehicles
    return RingState(
        odometer=np.arange(n) * (cfg.length / n),
        speeds=np.full(n, float(cfg.v_start)),
        accels=np.zeros(n),
        length=cfg.length,
        in_contact=np.zeros(n, dtype=bool),
    )


def ring_states(state: RingState, vehicle_length: float) -> CFState:
    lead = np.roll(np.arange(len(state.speeds)), -1)
    return CFState(state.speeds, state.speeds - state.speeds[lead], state.headways() - vehicle_length)


def detect_collisions(before: RingState, after: RingState, l: float, dt: float = DT) -> list[tuple[float, int]]:
    """Log and resolve contacts in ``after`` (modified in place).

    A follower whose spacing is <= 0 is put ``CONTACT_BACKOFF`` metres behind
    its leader's rear at the leader's speed. Only the first step of a contact
    episode produces an event.
    """
    n = len(after.speeds)
    prev = before.in_contact if before.in_contact is not None else np.zeros(n, dtype=bool)
    contact = np.zeros(n, dtype=bool)
    t = after.step * dt
    events = []
    for _ in range(n + 1):
        gap = after.headways() - l
        bad = np.nonzero(gap <= 0)[0]
        if bad.size == 0:
            break
        for i in bad.tolist():
            if not contact[i] and not prev[i]:
                events.append((t, i))
            contact[i] = True
        lead = (bad + 1) % n
        lead_pos = after.odometer[lead] + np.where(bad == n - 1, after.length, 0.0)
        after.odometer[bad] = lead_pos - l - CONTACT_BACKOFF
        after.speeds[bad] = after.speeds[lead]
    after.in_contact = contact
    after.collisions.extend(events)
    return events


def step_ring(state: RingState, model, cfg: RingConfig, rng: np.random.Generator | None = None) -> RingState:
    """One synchronous update of every vehicle from the current snapshot."""
    n = len(state.speeds)
    l = cfg.vehicle_length
    lead = np.roll(np.arange(n), -1)
    s = ring_states(state, l)
    a = np.asarray(model.accel(s.v, s.dv, s.d, v_lead=state.speeds[lead], a_lead=state.accels[lead], rng=rng),
                   dtype=float).reshape(n).copy()
    if cfg.perturbation is not None:
        forced = cfg.perturbation.override(state.step, cfg.dt)
        if forced is not None:
            a[cfg.perturbation.target_vehicle] = forced
    v_new = np.maximum(state.speeds + a * cfg.dt, 0.0)
    after = RingState(
        odometer=state.odometer + 0.5 * (state.speeds + v_new) * cfg.dt,
        speeds=v_new,
        accels=a,
        length=state.length,
        step=state.step + 1,
        in_contact=None,
        collisions=list(state.collisions),
    )
    detect_collisions(state, after, l, cfg.dt)
    return after


@dataclass
class TrialRecord:
    times: np.ndarray
    positions: np.ndarray
    speeds: np.ndarray
    accels: np.ndarray
    collisions: list[tuple[float, int]]
    max_closure_error: float = 0.0


def run_trial(cfg: RingConfig, rng: np.random.Generator | None, record_every: int = 0) -> TrialRecord:
    """Simulate one trial; ``record_every`` > 0 keeps every k-th snapshot."""
    if cfg.model is None:
        raise ValueError("RingConfig.model is not set")
    state = init_ring(cfg)
    snaps = []
    closure = 0.0

    def snap(st):
        snaps.append((st.step * cfg.dt, st.positions.copy(), st.speeds.copy(), st.accels.copy()))

    if record_every:
        snap(state)
    for _ in range(cfg.n_steps):
        state = step_ring(state, cfg.model, cfg, rng)
        closure = max(closure, abs(math.fsum(state.headways()) - cfg.length))
        if record_every and state.step % record_every == 0:
            snap(state)
    if snaps:
        times = np.array([s[0] for s in snaps])
        pos, spd, acc = (np.vstack([s[i] for s in snaps]) for i in (1, 2, 3))
    else:
        times = np.zeros(0)
        pos = spd = acc = np.zeros((0, cfg.n_vehicles))
    return TrialRecord(times, pos, spd, acc, list(state.collisions), closure)


@dataclass
class ExperimentResult:
    counts: list[int]
    trials: list[TrialRecord] = field(repr=False, default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.counts))

    @property
    def std(self) -> float:
        return float(np.std(self.counts))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "per_trial": list(self.counts)}


def run_experiment(cfg: RingConfig, record_every: int = 0, threads: int = 1) -> ExperimentResult:
    """Run ``cfg.trials`` independently seeded trials and collect collision counts."""
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.trials)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(lambda r: run_trial(cfg, r, record_every), rngs))
    else:
        records = [run_trial(cfg, r, record_every) for r in rngs]
    return ExperimentResult([len(r.collisions) for r in records], records if record_every else [])


def idm_equilibrium_speed(params: IDMParams, n_vehicles: int, length: float,
                          vehicle_length: float = 5.0) -> float:
    """Speed with zero IDM acceleration at uniform spacing L/N - l (bisection on [0, v0])."""
    d = length / n_vehicles - vehicle_length

    def f(v):
        return idm_accel(params, CFState(v, 0.0, d))

    lo, hi = 0.0, float(params.v0)
    f_lo = f(lo)
    if f_lo == 0.0:
        return 0.0
    if d <= 0 or f_lo < 0:
        raise ValueError("no equilibrium speed in [0, v0] for this density")
    while True:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        fm = f(mid)
        if fm == 0.0:
            return mid
        if fm > 0:
            lo = mid
        else:
            hi = mid
    return lo if abs(f(lo)) <= abs(f(hi)) else hi


def write_trials_csv(trials: Sequence[TrialRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "t", "vehicle", "x", "v", "a"])
        for k, rec in enumerate(trials):
            for ti, t in enumerate(rec.times):
                for i in range(rec.positions.shape[1]):
                    w.writerow([k, f"{t:.1f}", i, f"{rec.positions[ti, i]:.4f}",
                                f"{rec.speeds[ti, i]:.4f}", f"{rec.accels[ti, i]:.4f}"])


def _speed_colour(v: float, v_max: float) -> str:
    # red (slow) to green (fast)
    r = max(0.0, min(1.0, v / v_max if v_max > 0 else 0.0))
    return f"rgb({int(220 * (1 - r))},{int(180 * r)},60)"


def write_spacetime_svg(rec: TrialRecord, length: float, path: str | Path, width: int = 900,
                        height: int = 500, vehicle_stride: int = 1) -> None:
    """Wrapped position vs time, one polyline per vehicle, coloured by mean speed; contacts in black."""
    if rec.times.size == 0:
        raise ValueError("trial was not recorded")
    t_max = float(rec.times[-1]) or 1.0
    v_max = float(rec.speeds.max()) or 1.0
    pad = 40
    sx = (width - 2 * pad) / t_max
    sy = (height - 2 * pad) / length
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             f'fill="none" stroke="#444"/>',
             f'<text x="{width / 2}" y="{height - 8}" font-size="12" text-anchor="middle">time (s)</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
             f'text-anchor="middle">position (m)</text>']
    for i in range(0, rec.positions.shape[1], vehicle_stride):
        x = rec.positions[:, i]
        breaks = np.nonzero(np.diff(x) < -length / 2)[0] + 1
        colour = _speed_colour(float(rec.speeds[:, i].mean()), v_max)
        for seg in np.split(np.arange(len(x)), breaks):
            if seg.size < 2:
                continue
            pts = " ".join(f"{pad + rec.times[j] * sx:.1f},{height - pad - x[j] * sy:.1f}" for j in seg)
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="0.6" points="{pts}"/>')
    for t, i in rec.collisions:
        j = int(np.searchsorted(rec.times, t))
        j = min(j, len(rec.times) - 1)
        parts.append(f'<circle cx="{pad + t * sx:.1f}" cy="{height - pad - rec.positions[j, i] * sy:.1f}" '
                     f'r="2.5" fill="black"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def config_to_dict(cfg: RingConfig) -> dict:
    d = asdict(cfg)
    d.pop("model")
    return d
