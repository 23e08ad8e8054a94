"""Evaluation metrics: one-step RMSE, DTW family, displacement errors,
overlapping rate, trajectory likelihood and the Mann-Whitney comparison."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .inference import Rollout
from .state_space import ClusterModel

UNSEEN_TRANSITION_PROB = 1e-6
SIGNIFICANCE = 0.1


def rmse_one_step(pred, truth) -> float:
    """Pooled RMSE; ``pred``/``truth`` are arrays or equally long lists of per-pair arrays."""
    if isinstance(pred, (list, tuple)) and pred and np.ndim(pred[0]) > 0:
        if len(pred) != len(truth):
            raise ValueError("pred and truth hold different numbers of pairs")
        for p, t in zip(pred, truth):
            if len(p) != len(t):
                raise ValueError("length mismatch between prediction and truth")
        pred = np.concatenate([np.asarray(p, float) for p in pred])
        truth = np.concatenate([np.asarray(t, float) for t in truth])
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError("length mismatch between prediction and truth")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def dtw_distance(x: Sequence[float], y: Sequence[float]) -> float:
    """Unconstrained DTW with squared local cost and steps (1,0), (0,1), (1,1)."""
    x = [float(a) for a in x]
    y = [float(b) for b in y]
    if not x or not y:
        raise ValueError("DTW needs non-empty sequences")
    inf = math.inf
    prev = [inf] * (len(y) + 1)
    prev[0] = 0.0
    for xi in x:
        cur = [inf] * (len(y) + 1)
        for j, yj in enumerate(y, start=1):
            c = (xi - yj) ** 2
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = c + best
        prev = cur
        prev[0] = inf
    return prev[-1]


def ade(pred_positions, true_positions) -> float:
    p, t = np.asarray(pred_positions, float), np.asarray(true_positions, float)
    return float(np.mean(np.abs(p - t[:len(p)])))


def fde(pred_positions, true_positions) -> float:
    p, t = np.asarray(pred_positions, float), np.asarray(true_positions, float)
    return float(abs(p[-1] - t[len(p) - 1]))


def min_over_rollouts(metric_fn: Callable[[Rollout], float], rollouts: Iterable[Rollout]) -> float:
    """Minimum of ``metric_fn`` over the non-crashing rollouts."""
    values = [metric_fn(r) for r in rollouts if not r.crashed]
    if not values:
        raise ValueError("all rollouts crashed")
    return min(values)


def open_loop_metrics(rollouts: Sequence[Rollout], truth_x, truth_v, truth_d) -> dict[str, float]:
    """minDTW(s), minDTW(v), minADE and minFDE over the non-crashing rollouts."""
    return {
        "min_dtw_s": min_over_rollouts(lambda r: dtw_distance(r.spacings, truth_d), rollouts),
        "min_dtw_v": min_over_rollouts(lambda r: dtw_distance(r.speeds, truth_v), rollouts),
        "min_ade": min_over_rollouts(lambda r: ade(r.positions, truth_x), rollouts),
        "min_fde": min_over_rollouts(lambda r: fde(r.positions, truth_x), rollouts),
    }


def fair_filter(pair_ids: Sequence[str], results: Mapping[str, Mapping[str, Sequence[Rollout]]],
                stochastic: Iterable[str] = ("sidm", "mccf-stoch")) -> list[str]:
    """Pairs on which no deterministic model crashes and every stochastic model
    has at least one crash-free rollout.

    ``results[model][pair_id]`` is the list of that model's rollouts.
    """
    stochastic = set(stochastic)
    keep = []
    for pid in pair_ids:
        ok = True
        for model, per_pair in results.items():
            rolls = per_pair[pid]
            if model in stochastic:
                ok = any(not r.crashed for r in rolls)
            else:
                ok = not any(r.crashed for r in rolls)
            if not ok:
                break
        if ok:
            keep.append(pid)
    return keep


def overlap_rate(rollouts: Sequence[Rollout]) -> float:
    """Fraction of pairs whose single rollout ever reaches d <= 0."""
    if not rollouts:
        return float("nan")
    return sum(1 for r in rollouts if r.crashed) / len(rollouts)


def geom_mean_prob(model: ClusterModel, trajectory, eps: float = UNSEEN_TRANSITION_PROB) -> float:
    """exp of the mean log transition probability along a state sequence.

    ``trajectory`` is a :class:`CFState` of arrays or an ``(T, 3)`` array of
    (dv, d, v) rows. Transitions never seen in training count as ``eps``.
    """
    if hasattr(trajectory, "dv"):
        pts = np.column_stack([np.asarray(trajectory.dv, float), np.asarray(trajectory.d, float),
                               np.asarray(trajectory.v, float)])
    else:
        pts = np.asarray(trajectory, float)
    if len(pts) < 2:
        raise ValueError("need at least two states")
    ids = model.assign(pts)
    p = model.transitions.prob(ids[:-1], ids[1:])
    p = np.where(p > 0, p, eps)
    return float(np.exp(np.mean(np.log(p))))


@dataclass
class MannWhitneyResult:
    statistic: float
    pvalue: float
    u_other: float

    @property
    def significant(self) -> bool:
        return self.pvalue < SIGNIFICANCE


def mann_whitney(sample_a, sample_b) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U; normal approximation with tie and continuity corrections.

    ``statistic`` is U of ``sample_a``: rank sum minus n_a (n_a + 1) / 2.
    """
    a, b = np.asarray(sample_a, float), np.asarray(sample_b, float)
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        raise ValueError("each sample needs at least two observations")
    ranks = rankdata(np.concatenate([a, b]))
    u1 = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    u2 = n1 * n2 - u1
    n = n1 + n2
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return MannWhitneyResult(u1, 1.0, u2)
    z = (max(u1, u2) - n1 * n2 / 2.0 - 0.5) / math.sqrt(var)
    p = float(min(1.0, 2.0 * norm.sf(z)))
    return MannWhitneyResult(u1, p, u2)


@dataclass
class EvalReport:
    """Per-model metric table (``rows[model][metric]``) plus pair counts."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    k: int | None = None

    def to_dict(self) -> dict:
        return {"k": self.k, "counts": self.counts, "rows": self.rows}


@dataclass
class ProbReport:
    ground_truth: list[float]
    models: dict[str, list[float]]
    tests: dict[str, MannWhitneyResult]

    def summary(self) -> list[dict]:
        out = [{"model": "Ground Truth", "statistic": None, "pvalue": None, "significant": None,
                "mean": float(np.mean(self.ground_truth)), "median": float(np.median(self.ground_truth))}]
        for name, vals in self.models.items():
            t = self.tests[name]
            out.append({"model": name, "statistic": t.statistic, "pvalue": t.pvalue,
                        "significant": t.significant, "mean": float(np.mean(vals)),
                        "median": float(np.median(vals))})
        return out


def prob_report(model: ClusterModel, truth: Sequence, generated: Mapping[str, Sequence]) -> ProbReport:
    """Geometric-mean probabilities for ground truth and each model, plus U tests against truth."""
    gt = [geom_mean_prob(model, s) for s in truth]
    per_model, tests = {}, {}
    for name, trajs in generated.items():
        vals = [geom_mean_prob(model, s) for s in trajs]
        per_model[name] = vals
        tests[name] = mann_whitney(vals, gt)
    return ProbReport(gt, per_model, tests)


ONE_STEP_COLUMNS = ("rmse_s", "rmse_v", "rmse_a")
OPEN_LOOP_COLUMNS = ("min_dtw_s", "min_dtw_v", "min_ade", "min_fde", "overlap_rate")


def format_table(report: EvalReport, columns: Sequence[str] = ONE_STEP_COLUMNS + OPEN_LOOP_COLUMNS) -> str:
    """Aligned text table, one row per model."""
    head = ["Model"] + list(columns)
    lines = [head]
    for model, row in report.rows.items():
        cells = [model]
        for c in columns:
            v = row.get(c)
            cells.append("-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}")
        lines.append(cells)
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))) for r in lines)


def format_prob_table(report: ProbReport) -> str:
    rows = [["Model", "Test Statistic", "p-Value", "Significant", "Mean", "Median"]]
    for r in report.summary():
        if r["statistic"] is None:
            rows.append([r["model"], "-", "-", "-", f"{r['mean']:.3f}", f"{r['median']:.3f}"])
        else:
            rows.append([r["model"], f"{r['statistic']:.0f}", f"{r['pvalue']:.3f}", str(r["significant"]),
                         f"{r['mean']:.3f}", f"{r['median']:.3f}"])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))) for r in rows)
