"""Trajectory-based calibration of the parametric baselines.

The objective simulates every training pair open-loop from its true initial
follower state and returns the pooled speed RMSE. It is evaluated for a whole
differential-evolution population at once: parameter rows broadcast against
``(members, pairs)`` state arrays.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baselines import MODEL_CLASSES, make_params
from .trajdata import DT, Dataset

logger = logging.getLogger(__name__)

CRASH_BACKOFF = 0.1
SIDM_NOISE_SEED = 12345

BOUNDS: dict[str, list[tuple[float, float]]] = {
    "idm": [(5.0, 50.0), (0.5, 3.0), (0.1, 5.0), (0.1, 10.0), (0.5, 10.0), (1.0, 10.0)],
    "vanarem": [(0.1, 5.0), (0.1, 5.0), (0.1, 5.0), (0.5, 3.0), (5.0, 50.0), (0.1, 5.0),
                (0.1, 10.0), (0.1, 10.0), (0.1, 1.0)],
    "fvdm-cth": [(0.1, 5.0), (0.1, 5.0), (0.1, 10.0), (0.5, 3.0), (5.0, 50.0)],
    "gipps": [(0.5, 3.0), (1.0, 4.0), (0.1, 1.5), (0.3, 1.0), (0.1, 10.0), (5.0, 50.0), (2.0, 5.0)],
}
BOUNDS["sidm"] = BOUNDS["idm"] + [(0.01, 2.0)]
BOUNDS["fvdm-sigmoid"] = BOUNDS["fvdm-cth"]


class CalibrationError(RuntimeError):
    pass


@dataclass
class DEConfig:
    strategy: str = "best1bin"
    popsize: int = 15
    mutation: tuple[float, float] = (0.5, 1.0)
    recombination: float = 0.7
    max_iter: int = 50
    tol: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy != "best1bin":
            raise ValueError("only the best1bin strategy is implemented")
        if self.popsize < 4:
            raise ValueError("popsize must be >= 4")
        lo, hi = self.mutation
        if not 0 < lo <= hi < 2:
            raise ValueError("mutation range must lie in (0, 2)")
        if not 0 <= self.recombination <= 1:
            raise ValueError("recombination must lie in [0, 1]")


@dataclass
class DEResult:
    x: np.ndarray
    fun: float
    history: list[float]
    nit: int
    nfev: int
    converged: bool


def _latin_hypercube(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    seg = 1.0 / n
    samples = seg * rng.uniform(size=(n, dim)) + np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
    out = np.empty_like(samples)
    for j in range(dim):
        out[:, j] = samples[rng.permutation(n), j]
    return out


def differential_evolution(objective: Callable, bounds: Sequence[tuple[float, float]],
                           cfg: DEConfig | None = None, vectorized: bool = False) -> DEResult:
    """Minimise ``objective`` over a box with DE/best/1/bin.

    The population holds ``popsize`` members, initialised by Latin hypercube
    sampling. The mutation factor is redrawn
    uniformly from ``cfg.mutation`` each generation; out-of-box trial
    components are resampled uniformly inside the box. Updating is
    generation-synchronous, so with ``vectorized=True`` the objective receives
    the whole ``(n, dim)`` trial matrix and must return ``n`` costs.
    Stops after ``max_iter`` generations or once
    ``std(costs) <= tol * |mean(costs)|``.
    """
    cfg = cfg or DEConfig()
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 0] > b[:, 1]):
        raise ValueError("bounds must be a sequence of (lo, hi) with lo <= hi")
    lo, hi = b[:, 0], b[:, 1]
    dim = len(b)
    n = cfg.popsize
    rng = np.random.default_rng(cfg.seed)

    def evaluate(pop: np.ndarray) -> np.ndarray:
        if vectorized:
            costs = np.asarray(objective(pop), dtype=float).reshape(len(pop))
        else:
            costs = np.array([float(objective(x)) for x in pop])
        return np.where(np.isfinite(costs), costs, np.inf)

    pop = lo + _latin_hypercube(rng, n, dim) * (hi - lo)
    energies = evaluate(pop)
    nfev = n
    if not np.any(np.isfinite(energies)):
        raise CalibrationError("objective is non-finite for the entire initial population")
    best = int(np.argmin(energies))
    history = [float(energies[best])]
    converged = False
    nit = 0
    for nit in range(1, cfg.max_iter + 1):
        F = rng.uniform(*cfg.mutation)
        trials = np.empty_like(pop)
        for i in range(n):
            r1, r2 = rng.choice(np.delete(np.arange(n), i), size=2, replace=False)
            mutant = pop[best] + F * (pop[r1] - pop[r2])
            cross = rng.uniform(size=dim) < cfg.recombination
            cross[rng.integers(dim)] = True
            trial = np.where(cross, mutant, pop[i])
            bad = (trial < lo) | (trial > hi)
            if bad.any():
                trial[bad] = lo[bad] + rng.uniform(size=int(bad.sum())) * (hi - lo)[bad]
            trials[i] = trial
        trial_e = evaluate(trials)
        nfev += n
        better = trial_e <= energies
        pop[better] = trials[better]
        energies[better] = trial_e[better]
        best = int(np.argmin(energies))
        history.append(float(energies[best]))
        if np.all(np.isfinite(energies)) and np.std(energies) <= cfg.tol * abs(np.mean(energies)):
            converged = True
            break
    return DEResult(pop[best].copy(), float(energies[best]), history, nit, nfev, converged)


@dataclass
class PairBatch:
    """Training pairs padded to a common length (leader series repeat their last value)."""

    x_l: np.ndarray
    v_l: np.ndarray
    a_l: np.ndarray
    v_true: np.ndarray
    mask: np.ndarray
    x0: np.ndarray
    v0: np.ndarray
    length: np.ndarray
    dt: float = DT

    @classmethod
    def from_dataset(cls, ds: Dataset, dt: float = DT) -> "PairBatch":
        if not ds.pairs:
            raise ValueError("empty training set")
        P, T = len(ds.pairs), max(len(p) for p in ds.pairs)

        def pad(attr):
            out = np.empty((P, T))
            for j, p in enumerate(ds.pairs):
                col = np.asarray(getattr(p, attr), float)
                out[j, :len(col)] = col
                out[j, len(col):] = col[-1]
            return out

        mask = np.zeros((P, T), dtype=bool)
        for j, p in enumerate(ds.pairs):
            mask[j, :len(p)] = True
        return cls(pad("x_l"), pad("v_l"), pad("a_l"), pad("v_f"), mask,
                   np.array([p.x_f[0] for p in ds.pairs], float),
                   np.array([p.v_f[0] for p in ds.pairs], float),
                   np.array([p.length_avg for p in ds.pairs], float), dt)

    @property
    def n_steps(self) -> int:
        return int(self.mask.sum())


def simulate_speeds(name: str, X: np.ndarray, batch: PairBatch, noise_seed: int = SIDM_NOISE_SEED) -> np.ndarray:
    """Open-loop follower speeds for each parameter row of ``X``: shape (members, pairs, steps).

    A step ending with d <= 0 puts the follower ``CRASH_BACKOFF`` metres behind
    the leader at the leader's speed and continues.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    params = make_params(name, X)
    stochastic = MODEL_CLASSES[name].stochastic
    P, T = batch.v_true.shape
    M = X.shape[0]
    xi = np.random.default_rng(noise_seed).standard_normal((T, P)) if stochastic else None
    x = np.broadcast_to(batch.x0, (M, P)).copy()
    v = np.broadcast_to(batch.v0, (M, P)).copy()
    out = np.empty((M, P, T))
    out[:, :, 0] = v
    dt = batch.dt
    with np.errstate(all="ignore"):
        for t in range(T - 1):
            d = batch.x_l[:, t] - x - batch.length
            dv = v - batch.v_l[:, t]
            kw = {"xi": xi[t]} if stochastic else {}
            a = params.accel(v, dv, d, v_lead=batch.v_l[:, t], a_lead=batch.a_l[:, t], **kw)
            v_new = np.maximum(v + a * dt, 0.0)
            x_new = x + 0.5 * (v + v_new) * dt
            crash = batch.x_l[:, t + 1] - x_new - batch.length <= 0
            if crash.any():
                x_new = np.where(crash, batch.x_l[:, t + 1] - batch.length - CRASH_BACKOFF, x_new)
                v_new = np.where(crash, np.broadcast_to(batch.v_l[:, t + 1], (M, P)), v_new)
            x, v = x_new, v_new
            out[:, :, t + 1] = v
    return out


def population_rmse_v(name: str, X: np.ndarray, batch: PairBatch, noise_seed: int = SIDM_NOISE_SEED) -> np.ndarray:
    """Pooled speed RMSE per parameter row; non-finite rows cost +inf."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    finite = np.all(np.isfinite(X), axis=1)
    cost = np.full(len(X), np.inf)
    if finite.any():
        v = simulate_speeds(name, X[finite], batch, noise_seed)
        err = np.where(batch.mask, v - batch.v_true, 0.0)
        with np.errstate(invalid="ignore", over="ignore"):
            c = np.sqrt(np.sum(err ** 2, axis=(1, 2)) / batch.n_steps)
        cost[finite] = np.where(np.isfinite(c), c, np.inf)
    return cost


def rmse_v_objective(name: str, params, train: Dataset | PairBatch, noise_seed: int = SIDM_NOISE_SEED) -> float:
    """Pooled open-loop speed RMSE of one parameter set (object with ``to_vector`` or flat vector)."""
    batch = train if isinstance(train, PairBatch) else PairBatch.from_dataset(train)
    x = params.to_vector() if hasattr(params, "to_vector") else np.asarray(params, dtype=float)
    return float(population_rmse_v(name, x[None, :], batch, noise_seed)[0])


@dataclass
class CalibrationResult:
    model: str
    params: object
    cost: float
    history: list[float]
    bounds: list[tuple[float, float]]
    wall_time: float
    converged: bool
    nfev: int = 0
    de: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "model": self.model,
            "bounds": {n: list(b) for n, b in zip(type(self.params).names(), self.bounds)},
            "params": self.params.to_config()["params"],
            "best_cost": self.cost,
            "history": self.history,
            "wall_time": self.wall_time,
            "converged": self.converged,
            "nfev": self.nfev,
            "de": self.de,
        }


def calibrate_model(name: str, train: Dataset, cfg: DEConfig | None = None) -> CalibrationResult:
    """Fit one baseline to ``train`` by DE over its parameter box."""
    if name not in BOUNDS:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(BOUNDS)}")
    cfg = cfg or DEConfig()
    batch = PairBatch.from_dataset(train)
    start = time.perf_counter()
    res = differential_evolution(lambda X: population_rmse_v(name, X, batch), BOUNDS[name], cfg,
                                 vectorized=True)
    wall = time.perf_counter() - start
    logger.info("calibrated %s: RMSE_v=%.4f after %d generations (%.1fs)", name, res.fun, res.nit, wall)
    de = asdict(cfg)
    de["mutation"] = list(cfg.mutation)
    return CalibrationResult(name, make_params(name, res.x), res.fun, res.history, BOUNDS[name],
                             wall, res.converged, res.nfev, de)
