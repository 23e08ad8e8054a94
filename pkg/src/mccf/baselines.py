"""Parametric car-following models.

Every acceleration function broadcasts: parameter fields and state fields may
be scalars or arrays (the calibrator passes one parameter row per population
member, the ring simulator one state per vehicle). All outputs are clamped to
the practical range [-10, 5] m/s^2, and a non-positive spacing yields -10.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np

ACCEL_MIN = -10.0
ACCEL_MAX = 5.0


def clamp_accel(a):
    out = np.clip(a, ACCEL_MIN, ACCEL_MAX)
    return float(out) if np.ndim(out) == 0 else out


def _collision_guard(a, d):
    with np.errstate(invalid="ignore"):
        out = np.where(np.asarray(d) > 0, a, ACCEL_MIN)
    return clamp_accel(out)


class _Params:
    """Flat-vector and JSON helpers shared by the parameter dataclasses."""

    name: ClassVar[str]
    stochastic: ClassVar[bool] = False

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "profile"]

    @classmethod
    def from_vector(cls, x, **extra):
        # a 2-D input is one parameter row per population member; keep a trailing axis
        # so fields broadcast against (members, pairs) state arrays
        cols = [x[:, i:i + 1] if np.ndim(x) > 1 else float(x[i]) for i in range(len(cls.names()))]
        return cls(*cols, **extra)

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.names()], dtype=float)

    def to_config(self) -> dict:
        return {"model": self.name, "params": {n: float(getattr(self, n)) for n in self.names()}}


@dataclass
class IDMParams(_Params):
    v0: float = 15.0
    T: float = 1.0
    a_max: float = 1.0
    b: float = 1.5
    s0: float = 2.0
    delta: float = 4.0

    name: ClassVar[str] = "idm"

    def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None):
        return idm_accel(self, _State(v, dv, d))


@dataclass
class SIDMParams(_Params):
    v0: float = 15.0
    T: float = 1.0
    a_max: float = 1.0
    b: float = 1.5
    s0: float = 2.0
    delta: float = 4.0
    sigma: float = 0.1

    name: ClassVar[str] = "sidm"
    stochastic: ClassVar[bool] = True

    @property
    def idm(self) -> IDMParams:
        return IDMParams(self.v0, self.T, self.a_max, self.b, self.s0, self.delta)

    def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None, xi=None):
        return sidm_accel(self, _State(v, dv, d), rng, xi=xi)


@dataclass
class VanAremParams(_Params):
    k_a: float = 1.0
    k_v: float = 0.58
    k_d: float = 0.1
    t_system: float = 1.0
    v_int: float = 15.0
    r_min: float = 2.0
    d_p: float = 3.0
    d_dec: float = 3.0
    k: float = 0.3

    name: ClassVar[str] = "vanarem"

    def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None):
        return van_arem_accel(self, _State(v, dv, d), 0.0 if a_lead is None else a_lead)


@dataclass
class FVDMParams(_Params):
    K1: float = 0.5
    K2: float = 0.5
    s0: float = 2.0
    T: float = 1.2
    V_max: float = 15.0
    profile: str = "cth"

    stochastic: ClassVar[bool] = False

    @property
    def name(self) -> str:  # type: ignore[override]
        return f"fvdm-{self.profile}"

    def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None):
        return fvdm_accel(self, _State(v, dv, d))


@dataclass
class GippsParams(_Params):
    a_max: float = 1.5
    b: float = 2.0
    tau: float = 0.7
    theta: float = 0.35
    s0: float = 2.0
    V_max: float = 15.0
    b_hat: float = 3.0

    name: ClassVar[str] = "gipps"

    def accel(self, v, dv, d, v_lead=None, a_lead=None, rng=None):
        if v_lead is None:
            v_lead = np.asarray(v) - np.asarray(dv)
        v_next = gipps_next_speed(self, _State(v, dv, d), v_lead)
        return _collision_guard((v_next - np.asarray(v)) / self.tau, d)


@dataclass
class _State:
    v: object
    dv: object
    d: object


def idm_desired_gap(p: IDMParams, v, dv):
    return p.s0 + v * p.T + v * dv / (2.0 * np.sqrt(p.a_max * p.b))


def idm_accel(p: IDMParams, s) -> float | np.ndarray:
    """IDM acceleration ``a_max [1 - (v/v0)^delta - (s*/d)^2]``."""
    v, dv, d = np.asarray(s.v, float), np.asarray(s.dv, float), np.asarray(s.d, float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a = p.a_max * (1.0 - (v / p.v0) ** p.delta - (idm_desired_gap(p, v, dv) / d) ** 2)
    return _collision_guard(a, d)


def sidm_accel(p: SIDMParams, s, rng: np.random.Generator | None = None, xi=None):
    """IDM plus ``sigma`` times a standard normal draw (or the supplied ``xi``)."""
    base = idm_accel(p.idm, s)
    if xi is None:
        if rng is None:
            raise ValueError("sidm_accel needs an rng or explicit noise")
        xi = rng.standard_normal(np.shape(base))
    noisy = np.asarray(base) + p.sigma * np.asarray(xi)
    return _collision_guard(noisy, s.d)


def van_arem_accel(p: VanAremParams, s, a_lead) -> float | np.ndarray:
    """Minimum of the speed demand and the spacing/relative-speed demand."""
    v, dv, d = np.asarray(s.v, float), np.asarray(s.dv, float), np.asarray(s.d, float)
    r_safe = dv ** 2 / 2.0 * (1.0 / p.d_p - 1.0 / p.d_dec)
    r_system = p.t_system * v
    d_ref = np.maximum(np.maximum(r_safe, r_system), p.r_min)
    a_speed = p.k * (p.v_int - v)
    a_dist = p.k_a * np.asarray(a_lead, float) - p.k_v * dv + p.k_d * (d - d_ref)
    return _collision_guard(np.minimum(a_speed, a_dist), d)


def fvdm_desired_speed(p: FVDMParams, d):
    d = np.asarray(d, float)
    if p.profile == "cth":
        v = np.minimum(p.V_max, (d - p.s0) / p.T)
        return np.where(d <= p.s0, 0.0, v)
    if p.profile == "sigmoid":
        top = p.s0 + p.T * p.V_max
        mid = p.V_max / 2.0 * (1.0 - np.cos(np.pi * (d - p.s0) / (p.T * p.V_max)))
        return np.where(d <= p.s0, 0.0, np.where(d >= top, p.V_max, mid))
    raise ValueError(f"unknown FVDM profile {p.profile!r}")


def fvdm_accel(p: FVDMParams, s) -> float | np.ndarray:
    v, dv, d = np.asarray(s.v, float), np.asarray(s.dv, float), np.asarray(s.d, float)
    a = p.K1 * (fvdm_desired_speed(p, d) - v) - p.K2 * dv
    return _collision_guard(a, d)


def gipps_next_speed(p: GippsParams, s, v_lead) -> float | np.ndarray:
    """Gipps speed one reaction time ahead: min of free-flow and safe-braking terms.

    A negative radicand in the braking term means no safe speed exists; the
    result is then 0.
    """
    v, d = np.asarray(s.v, float), np.asarray(s.d, float)
    v_lead = np.asarray(v_lead, float)
    ratio = v / p.V_max
    free = v + 2.5 * p.a_max * p.tau * (1.0 - ratio) * np.sqrt(0.025 + ratio)
    lag = p.tau / 2.0 + p.theta
    radicand = p.b ** 2 * lag ** 2 + p.b * (2.0 * (d - p.s0) - p.tau * v + v_lead ** 2 / p.b_hat)
    with np.errstate(invalid="ignore"):
        brake = np.where(radicand >= 0, -p.b * lag + np.sqrt(np.maximum(radicand, 0.0)), 0.0)
    out = np.maximum(np.minimum(free, brake), 0.0)
    return float(out) if np.ndim(out) == 0 else out


MODEL_CLASSES = {
    "idm": IDMParams,
    "sidm": SIDMParams,
    "vanarem": VanAremParams,
    "fvdm-cth": FVDMParams,
    "fvdm-sigmoid": FVDMParams,
    "gipps": GippsParams,
}


def make_params(name: str, values) -> _Params:
    """Build a parameter set from a flat vector or a name->value mapping."""
    if name not in MODEL_CLASSES:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODEL_CLASSES)}")
    cls = MODEL_CLASSES[name]
    extra = {"profile": name.split("-")[1]} if cls is FVDMParams else {}
    if isinstance(values, dict):
        return cls(**{k: float(values[k]) for k in cls.names()}, **extra)
    return cls.from_vector(np.asarray(values, dtype=float), **extra)


def params_from_config(doc: dict) -> _Params:
    """Inverse of ``to_config``: ``{"model": name, "params": {...}}``."""
    return make_params(doc["model"], doc["params"])


def idm_equilibrium_gap(p: IDMParams, v: float) -> float:
    """Spacing at which a follower at speed ``v`` with dv = 0 has zero IDM acceleration."""
    free = 1.0 - (v / p.v0) ** p.delta
    if free <= 0:
        return float("inf")
    return float(idm_desired_gap(p, v, 0.0) / np.sqrt(free))


__all__ = [
    "ACCEL_MIN", "ACCEL_MAX", "clamp_accel", "IDMParams", "SIDMParams", "VanAremParams",
    "FVDMParams", "GippsParams", "idm_accel", "sidm_accel", "van_arem_accel", "fvdm_accel",
    "fvdm_desired_speed", "gipps_next_speed", "idm_desired_gap", "idm_equilibrium_gap",
    "MODEL_CLASSES", "make_params", "params_from_config",
]
