"""Trajectory ingestion and car-following preprocessing.

Pairs are stored column-wise (one numpy array per kinematic channel) since
every downstream consumer works on whole series at once.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

DT = 0.1
DEFAULT_VEHICLE_LENGTH = 5.0

MIN_DURATION = 10.0
MAX_SPACING = 45.0
MIN_PEAK_SPEED = 3.0
ACCEL_BOUNDS = (-10.0, 5.0)
TRIM_SECONDS = 2.0

REQUIRED_COLUMNS = ("pair_id", "t", "x_f", "v_f", "x_l", "v_l")
OPTIONAL_COLUMNS = ("a_f", "a_l", "length_f", "length_l", "interaction_type")

_TIME_EPS = 1e-6


class ParseError(ValueError):
    """Malformed input row; carries the 1-based file line number."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ValidationError(ValueError):
    """Structurally valid input that violates a data contract."""


class TrajectoryPoint(NamedTuple):
    t: float
    x_f: float
    v_f: float
    a_f: float
    x_l: float
    v_l: float
    a_l: float


class CFState(NamedTuple):
    """Car-following state (v, dv, d).

    Fields may be scalars or equally shaped arrays.
    """

    v: float
    dv: float
    d: float


@dataclass
class TrajectoryPair:
    """One leader/follower episode sampled on a fixed time grid.

    A leaderless (solo) series has ``x_l``/``v_l`` set to NaN.
    """

    pair_id: str
    t: np.ndarray
    x_f: np.ndarray
    v_f: np.ndarray
    a_f: np.ndarray
    x_l: np.ndarray
    v_l: np.ndarray
    a_l: np.ndarray
    length_avg: float = DEFAULT_VEHICLE_LENGTH
    interaction_type: str = ""

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self.t) else 0.0

    @property
    def spacing(self) -> np.ndarray:
        return self.x_l - self.x_f - self.length_avg

    def points(self) -> Iterator[TrajectoryPoint]:
        for row in zip(self.t, self.x_f, self.v_f, self.a_f, self.x_l, self.v_l, self.a_l):
            yield TrajectoryPoint(*(float(x) for x in row))

    def slice(self, start: int, stop: int, pair_id: str | None = None) -> "TrajectoryPair":
        sl = slice(start, stop)
        return replace(
            self,
            pair_id=self.pair_id if pair_id is None else pair_id,
            t=self.t[sl], x_f=self.x_f[sl], v_f=self.v_f[sl], a_f=self.a_f[sl],
            x_l=self.x_l[sl], v_l=self.v_l[sl], a_l=self.a_l[sl],
        )


@dataclass
class Dataset:
    pairs: list[TrajectoryPair] = field(default_factory=list)
    split_tag: str = ""

    def __post_init__(self) -> None:
        ids = [p.pair_id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValidationError("pair_ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[TrajectoryPair]:
        return iter(self.pairs)

    @property
    def n_states(self) -> int:
        return sum(len(p) for p in self.pairs)


def forward_difference(values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Forward finite difference; the last point repeats the previous value."""
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    if len(values) < 2:
        return out
    out[:-1] = np.diff(values) / np.diff(t)
    out[-1] = out[-2]
    return out


def _float(cell: str, column: str, line: int, path: str, allow_empty: bool = False) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() == "nan":
        if allow_empty:
            return math.nan
        raise ParseError(f"missing value in column {column!r}", line, path)
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"cannot parse {cell!r} in column {column!r}", line, path) from None


def parse_trajectory_csv(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    dt: float = DT,
    default_length: float = DEFAULT_VEHICLE_LENGTH,
) -> Dataset:
    """Read a trajectory CSV into a :class:`Dataset`.

    Args:
        path: CSV file with a header row.
        schema: Optional map from canonical column name (``pair_id``, ``t``,
            ``x_f``...) to the header used in the file. Unmapped names are
            looked up verbatim.
        dt: Nominal sampling interval, used only for validation.
        default_length: Vehicle length when no length columns exist.

    Raises:
        ParseError: on a malformed row (message carries the line number).
        ValidationError: on duplicate or non-monotone time stamps in a pair.
    """
    path = str(path)
    schema = dict(schema or {})
    cols = {name: schema.get(name, name) for name in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}

    rows: dict[str, list[tuple[int, dict[str, float]]]] = {}
    kinds: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file, header row required", 1, path) from None
        index = {h: i for i, h in enumerate(header)}
        missing = [c for c in REQUIRED_COLUMNS if cols[c] not in index]
        if missing:
            raise ParseError(f"missing required columns {missing}", 1, path)
        present = [c for c in OPTIONAL_COLUMNS if cols[c] in index]

        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno, path)
            pid = row[index[cols["pair_id"]]].strip()
            if not pid:
                raise ParseError("empty pair_id", lineno, path)
            rec = {}
            for c in ("t", "x_f", "v_f"):
                rec[c] = _float(row[index[cols[c]]], c, lineno, path)
            for c in ("x_l", "v_l"):
                rec[c] = _float(row[index[cols[c]]], c, lineno, path, allow_empty=True)
            for c in present:
                if c == "interaction_type":
                    kinds.setdefault(pid, row[index[cols[c]]].strip())
                else:
                    rec[c] = _float(row[index[cols[c]]], c, lineno, path, allow_empty=True)
            rows.setdefault(pid, []).append((lineno, rec))

    pairs = []
    for pid, recs in rows.items():
        recs.sort(key=lambda r: r[1]["t"])
        t = np.array([r["t"] for _, r in recs])
        steps = np.diff(t)
        if np.any(steps <= 0):
            bad = int(np.argmax(steps <= 0))
            raise ValidationError(
                f"pair {pid!r}: duplicate or non-monotone time stamp t={t[bad + 1]} "
                f"(line {recs[bad + 1][0]})"
            )
        col = {c: np.array([r.get(c, math.nan) for _, r in recs]) for c in
               ("x_f", "v_f", "x_l", "v_l", "a_f", "a_l", "length_f", "length_l")}
        a_f = col["a_f"]
        if np.all(np.isnan(a_f)):
            a_f = forward_difference(col["v_f"], t)
        a_l = col["a_l"]
        if np.all(np.isnan(a_l)):
            a_l = forward_difference(col["v_l"], t)
        lengths = np.concatenate([col["length_f"], col["length_l"]])
        lengths = lengths[~np.isnan(lengths)]
        length = float(lengths.mean()) if lengths.size else default_length
        pairs.append(TrajectoryPair(
            pair_id=pid, t=t, x_f=col["x_f"], v_f=col["v_f"], a_f=a_f,
            x_l=col["x_l"], v_l=col["v_l"], a_l=a_l,
            length_avg=length, interaction_type=kinds.get(pid, ""),
        ))
    if any(np.any(p.v_f < 0) or np.any(p.v_l < 0) for p in pairs):
        raise ValidationError("negative speed in input")
    return Dataset(pairs)


def write_trajectory_csv(ds: Dataset, path: str | Path) -> None:
    """Write a dataset in the canonical column layout (lengths as length_f=length_l=l)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "t", "x_f", "v_f", "x_l", "v_l", "a_f", "a_l",
                    "length_f", "length_l", "interaction_type"])
        for p in ds.pairs:
            for pt in p.points():
                w.writerow([p.pair_id, repr(pt.t), repr(pt.x_f), repr(pt.v_f),
                            repr(pt.x_l), repr(pt.v_l), repr(pt.a_f), repr(pt.a_l),
                            repr(p.length_avg), repr(p.length_avg), p.interaction_type])


def derive_states(pair: TrajectoryPair) -> CFState:
    """Per-point car-following state as arrays: v, dv = v_f - v_l, d = x_l - x_f - l."""
    return CFState(
        v=np.asarray(pair.v_f, dtype=float),
        dv=pair.v_f - pair.v_l,
        d=pair.x_l - pair.x_f - pair.length_avg,
    )


def check_consistency(pair: TrajectoryPair, tol: float = 0.01) -> list[str]:
    """Compare recorded follower positions with trapezoidal integration of speed.

    Returns one warning line per step whose position increment disagrees with
    the speed columns by more than ``tol`` metres.
    """
    dx = np.diff(pair.x_f)
    expected = 0.5 * (pair.v_f[:-1] + pair.v_f[1:]) * np.diff(pair.t)
    bad = np.nonzero(np.abs(dx - expected) > tol)[0]
    return [
        f"{pair.pair_id}: step {i} position increment {dx[i]:.4f} m vs speed-implied {expected[i]:.4f} m"
        for i in bad
    ]


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges of consecutive True entries."""
    if not mask.any():
        return []
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.nonzero(edges == 1)[0]
    stops = np.nonzero(edges == -1)[0]
    return list(zip(starts.tolist(), stops.tolist()))


def _passes_pair_rules(p: TrajectoryPair, min_duration: float, max_spacing: float,
                       min_peak_speed: float) -> bool:
    if len(p) < 2 or p.duration < min_duration - _TIME_EPS:
        return False
    d = p.spacing
    if np.any(np.isnan(d)) or np.any(d <= 0) or np.any(d > max_spacing):
        return False
    return max(np.max(p.v_f), np.max(p.v_l)) > min_peak_speed


def preprocess_pairs(
    ds: Dataset,
    min_duration: float = MIN_DURATION,
    max_spacing: float = MAX_SPACING,
    min_peak_speed: float = MIN_PEAK_SPEED,
    accel_bounds: tuple[float, float] = ACCEL_BOUNDS,
    trim: float = TRIM_SECONDS,
    dt: float = DT,
) -> Dataset:
    """Filter raw pairs into clean car-following episodes.

    Order: pair-level rules (duration, spacing, peak speed), then removal of
    steps with out-of-bounds follower acceleration, which splits a pair into
    contiguous pieces that are each re-checked, then trimming of ``trim``
    seconds at both ends. Sampling gaps larger than 1.5 dt also split a pair.
    """
    lo, hi = accel_bounds
    out = []
    for pair in ds.pairs:
        if not _passes_pair_rules(pair, min_duration, max_spacing, min_peak_speed):
            continue
        ok = (pair.a_f >= lo) & (pair.a_f <= hi)
        pieces = []
        for start, stop in _runs(ok):
            gaps = np.nonzero(np.diff(pair.t[start:stop]) > 1.5 * dt)[0]
            bounds = [start] + [start + g + 1 for g in gaps] + [stop]
            pieces.extend(zip(bounds[:-1], bounds[1:]))
        pieces = [(a, b) for a, b in pieces
                  if _passes_pair_rules(pair.slice(a, b), min_duration, max_spacing, min_peak_speed)]
        for k, (a, b) in enumerate(pieces):
            pid = pair.pair_id if len(pieces) == 1 else f"{pair.pair_id}#{k}"
            piece = pair.slice(a, b, pid)
            t = piece.t
            keep = np.nonzero((t >= t[0] + trim - _TIME_EPS) & (t <= t[-1] - trim + _TIME_EPS))[0]
            if keep.size >= 2:
                out.append(piece.slice(int(keep[0]), int(keep[-1]) + 1))
    logger.info("preprocess: %d raw pairs -> %d clean pairs", len(ds), len(out))
    return Dataset(out, ds.split_tag)


def split_train_test(ds: Dataset, test_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle of pair ids into (train, test); test gets round(n * fraction) pairs."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    by_id = {p.pair_id: p for p in ds.pairs}
    ids = sorted(by_id)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(round(len(ids) * test_fraction))
    test_ids = {ids[i] for i in order[:n_test]}
    train = [by_id[i] for i in ids if i not in test_ids]
    test = [by_id[i] for i in ids if i in test_ids]
    return Dataset(train, "train"), Dataset(test, "test")


def duration_summary(ds: Dataset) -> dict[str, float]:
    """Pair count and duration statistics (seconds)."""
    if not ds.pairs:
        return {"pairs": 0, "mean": math.nan, "std": math.nan, "max": math.nan, "min": math.nan}
    d = np.array([p.duration for p in ds.pairs])
    return {"pairs": len(d), "mean": float(d.mean()), "std": float(d.std()),
            "max": float(d.max()), "min": float(d.min())}
