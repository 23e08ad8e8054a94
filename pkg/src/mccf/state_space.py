"""Discretised state space, spatially constrained clustering and transitions.

State vectors are ordered ``(dv, d, v)`` everywhere in this module: relative
speed, spacing, follower speed.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .trajdata import Dataset, derive_states

logger = logging.getLogger(__name__)

DIMENSIONS = ("dv", "d", "v")
URBAN_RANGES = ((-10.0, 10.0), (0.0, 45.0), (0.0, 20.0))
EXTENDED_RANGES = ((-30.0, 30.0), (0.0, 150.0), (0.0, 40.0))
N_MIN = 10
FALLBACK_BINS = 32


class DegenerateDistributionError(ValueError):
    """Zero interquartile range; the Freedman-Diaconis width is undefined."""


class TrainingError(ValueError):
    pass


def iqr_bounds(samples: np.ndarray) -> tuple[float, float, float]:
    """(Q1, Q3, IQR) with linear-interpolation quantiles."""
    q1, q3 = np.percentile(samples, [25.0, 75.0])
    return float(q1), float(q3), float(q3 - q1)


def fd_bin_width(samples: Sequence[float] | np.ndarray) -> float:
    """Freedman-Diaconis width ``2 * IQR / n**(1/3)``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    _, _, iqr = iqr_bounds(x)
    if iqr <= 0:
        raise DegenerateDistributionError("interquartile range is zero")
    return 2.0 * iqr / float(np.cbrt(x.size))


def fd_num_bins(value_range: tuple[float, float], h: float) -> int:
    lo, hi = value_range
    if not hi > lo or not h > 0:
        raise ValueError("need max > min and h > 0")
    q = (hi - lo) / h
    # absorb representation error such as 20 / 0.4000000000000001
    return max(1, math.ceil(q - 1e-9 * max(1.0, q)))


@dataclass
class StateGrid:
    ranges: tuple[tuple[float, float], ...]
    bin_widths: tuple[float, ...]
    bin_counts: tuple[int, ...]
    clamped: tuple[int, ...] = (0, 0, 0)

    @property
    def lows(self) -> np.ndarray:
        return np.array([r[0] for r in self.ranges])

    @property
    def spans(self) -> np.ndarray:
        return np.array([r[1] - r[0] for r in self.ranges])

    @property
    def n_bins(self) -> int:
        return int(np.prod(self.bin_counts, dtype=np.int64))

    def bin_indices(self, points: np.ndarray) -> np.ndarray:
        """Integer bin triples for an ``(n, 3)`` array; bins are [lo, hi), outer bins absorb the rest."""
        points = np.atleast_2d(points)
        idx = np.floor((points - self.lows) / np.asarray(self.bin_widths)).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.bin_counts) - 1)

    def flat_index(self, idx: np.ndarray) -> np.ndarray:
        k = self.bin_counts
        idx = np.atleast_2d(idx)
        return (idx[:, 0] * k[1] + idx[:, 1]) * k[2] + idx[:, 2]

    def unflatten(self, flat: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.bin_counts), axis=-1)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.lows) / self.spans


def discretize_state(grid: StateGrid, state) -> tuple[int, int, int]:
    """Bin triple of a single :class:`CFState`."""
    idx = grid.bin_indices(np.array([[state.dv, state.d, state.v]], dtype=float))[0]
    return int(idx[0]), int(idx[1]), int(idx[2])


def state_matrix(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack all states of a dataset.

    Returns:
        points: ``(n, 3)`` array of (dv, d, v).
        accels: follower acceleration at each state.
        offsets: pair boundaries, ``len(pairs) + 1`` entries.
    """
    pts, acc, offsets = [], [], [0]
    for pair in ds.pairs:
        s = derive_states(pair)
        pts.append(np.column_stack([s.dv, s.d, s.v]))
        acc.append(np.asarray(pair.a_f, dtype=float))
        offsets.append(offsets[-1] + len(pair))
    if not pts:
        return np.empty((0, 3)), np.empty(0), np.array(offsets)
    return np.vstack(pts), np.concatenate(acc), np.array(offsets)


def build_grid(train: Dataset | np.ndarray,
               ranges: Sequence[tuple[float, float]] = URBAN_RANGES) -> StateGrid:
    """Uniform grid over ``ranges`` with per-dimension Freedman-Diaconis widths.

    ``train`` may be a dataset or an ``(n, 3)`` state matrix. A dimension with
    zero IQR falls back to :data:`FALLBACK_BINS` equal bins.
    """
    points = state_matrix(train)[0] if isinstance(train, Dataset) else np.asarray(train, float)
    if points.shape[0] < 2:
        raise TrainingError("need at least two training states to build a grid")
    if not np.all(np.isfinite(points)):
        raise TrainingError("training states contain NaN; augment solo series first")
    widths, counts, clamped = [], [], []
    for j, (lo, hi) in enumerate(ranges):
        col = points[:, j]
        try:
            h = fd_bin_width(col)
            k = fd_num_bins((lo, hi), h)
        except DegenerateDistributionError:
            k = FALLBACK_BINS
            h = (hi - lo) / k
            logger.warning("dimension %s has zero IQR; using %d bins", DIMENSIONS[j], k)
        n_out = int(np.count_nonzero((col < lo) | (col > hi)))
        if n_out:
            logger.warning("%d %s samples outside [%g, %g] clamped to boundary bins",
                           n_out, DIMENSIONS[j], lo, hi)
        widths.append(float(h))
        counts.append(int(k))
        clamped.append(n_out)
    return StateGrid(tuple((float(a), float(b)) for a, b in ranges),
                     tuple(widths), tuple(counts), tuple(clamped))


@dataclass
class Cluster:
    cluster_id: int
    count: int
    centroid: np.ndarray
    centroid_norm: np.ndarray
    accel_samples: np.ndarray


@dataclass
class TransitionMatrix:
    """Row-sparse transition table in CSR layout over cluster ids.

    Rows with no observed exits are empty (``indptr[c] == indptr[c + 1]``).
    """

    indptr: np.ndarray
    indices: np.ndarray
    counts: np.ndarray
    probs: np.ndarray
    _cum_key: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_counts(cls, n_clusters: int, src: np.ndarray, dst: np.ndarray) -> "TransitionMatrix":
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        codes, counts = np.unique(src * n_clusters + dst, return_counts=True)
        rows, cols = codes // n_clusters, codes % n_clusters
        indptr = np.zeros(n_clusters + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr)
        totals = np.bincount(rows, weights=counts, minlength=n_clusters)
        probs = counts / totals[rows]
        return cls(indptr, cols.astype(np.int64), counts.astype(np.int64), probs.astype(float))

    @property
    def n_clusters(self) -> int:
        return len(self.indptr) - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row(self, cid: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.indptr[cid], self.indptr[cid + 1]
        return self.indices[a:b], self.probs[a:b]

    @property
    def rows(self) -> dict[int, list[tuple[int, float]]]:
        out = {}
        for c in range(self.n_clusters):
            ids, p = self.row(c)
            if ids.size:
                out[c] = list(zip(ids.tolist(), p.tolist()))
        return out

    def prob(self, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        """P(dst | src) elementwise; unseen transitions give 0."""
        src = np.atleast_1d(src)
        dst = np.atleast_1d(dst)
        out = np.zeros(src.shape, dtype=float)
        for i, (s, d) in enumerate(zip(src, dst)):
            ids, p = self.row(int(s))
            j = np.searchsorted(ids, d)
            if j < ids.size and ids[j] == d:
                out[i] = p[j]
        return out

    def most_likely(self, src: np.ndarray) -> np.ndarray:
        """Argmax successor per source, lowest id on ties; self-loop for empty rows."""
        src = np.atleast_1d(src)
        out = src.copy()
        for i, s in enumerate(src):
            ids, p = self.row(int(s))
            if ids.size:
                out[i] = ids[int(np.argmax(p))]
        return out

    def cum_key(self) -> np.ndarray:
        """Row index plus within-row cumulative probability: globally nondecreasing."""
        if self._cum_key is None:
            key = np.empty_like(self.probs)
            for c in range(self.n_clusters):
                a, b = self.indptr[c], self.indptr[c + 1]
                if b > a:
                    cs = np.cumsum(self.probs[a:b])
                    cs[-1] = 1.0
                    key[a:b] = c + cs
            self._cum_key = key
        return self._cum_key

    def sample(self, src: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF draw of successors for uniform variates ``u`` in [0, 1)."""
        src = np.atleast_1d(src).astype(np.int64)
        key = self.cum_key()
        pos = np.searchsorted(key, src + np.asarray(u), side="right")
        pos = np.minimum(pos, self.indptr[src + 1] - 1)
        empty = self.indptr[src] == self.indptr[src + 1]
        out = np.where(empty, src, self.indices[np.maximum(pos, 0)] if key.size else src)
        return out.astype(np.int64)


def accel_distribution(samples: Iterable[float] | np.ndarray) -> np.ndarray:
    """Drop samples outside [Q1 - 1.5 IQR, Q3 + 1.5 IQR]; returns a sorted array."""
    x = np.sort(np.asarray(samples, dtype=float))
    if x.size == 0:
        return x
    q1, q3, iqr = iqr_bounds(x)
    return x[(x >= q1 - 1.5 * iqr) & (x <= q3 + 1.5 * iqr)]


@dataclass
class ClusterModel:
    """Trained MC-CF state model.

    Clusters are stored column-wise; ``cluster(i)`` materialises one.
    ``pool_vals[pool_ptr[i]:pool_ptr[i+1]]`` is the sorted, outlier-filtered
    acceleration pool of cluster ``i``.
    """

    grid: StateGrid
    counts: np.ndarray
    centroids: np.ndarray
    centroids_norm: np.ndarray
    pool_ptr: np.ndarray
    pool_vals: np.ndarray
    bin_keys: np.ndarray
    bin_ids: np.ndarray
    transitions: TransitionMatrix | None = None
    meta: dict = field(default_factory=dict)
    _tree: cKDTree | None = field(default=None, repr=False)
    _means: np.ndarray | None = field(default=None, repr=False)
    _pct_counts: dict = field(default_factory=dict, repr=False)

    @property
    def n_clusters(self) -> int:
        return len(self.counts)

    def pool(self, cid: int) -> np.ndarray:
        return self.pool_vals[self.pool_ptr[cid]:self.pool_ptr[cid + 1]]

    def cluster(self, cid: int) -> Cluster:
        return Cluster(cid, int(self.counts[cid]), self.centroids[cid].copy(),
                       self.centroids_norm[cid].copy(), self.pool(cid).copy())

    @property
    def clusters(self) -> list[Cluster]:
        return [self.cluster(c) for c in range(self.n_clusters)]

    @property
    def bin_to_cluster(self) -> dict[int, int]:
        return dict(zip(self.bin_keys.tolist(), self.bin_ids.tolist()))

    @property
    def pool_means(self) -> np.ndarray:
        if self._means is None:
            sizes = np.diff(self.pool_ptr)
            sums = np.add.reduceat(self.pool_vals, self.pool_ptr[:-1]) if self.pool_vals.size else np.zeros(0)
            self._means = sums / sizes
        return self._means

    def restricted_sizes(self, pct: float) -> np.ndarray:
        """Per-cluster count of pool samples at or below the pool's ``pct`` percentile."""
        if pct not in self._pct_counts:
            out = np.empty(self.n_clusters, dtype=np.int64)
            for c in range(self.n_clusters):
                pool = self.pool(c)
                q = np.percentile(pool, pct)
                out[c] = max(1, int(np.searchsorted(pool, q, side="right")))
            self._pct_counts[pct] = out
        return self._pct_counts[pct]

    def lookup_bins(self, flat: np.ndarray) -> np.ndarray:
        """Cluster id per flat bin index, -1 where the bin was never observed."""
        flat = np.atleast_1d(flat)
        pos = np.searchsorted(self.bin_keys, flat)
        pos = np.minimum(pos, len(self.bin_keys) - 1)
        hit = self.bin_keys[pos] == flat
        return np.where(hit, self.bin_ids[pos], -1)

    def assign(self, points: np.ndarray) -> np.ndarray:
        """Cluster per ``(n, 3)`` state row with the nearest-centroid fallback."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        ids = self.lookup_bins(self.grid.flat_index(self.grid.bin_indices(points)))
        miss = np.nonzero(ids < 0)[0]
        if miss.size:
            ids[miss] = self._nearest(self.grid.normalize(points[miss]))
        return ids

    def _nearest(self, norm_points: np.ndarray) -> np.ndarray:
        if self._tree is None:
            self._tree = cKDTree(self.centroids_norm)
        k = min(4, self.n_clusters)
        dist, idx = self._tree.query(norm_points, k=k)
        dist = dist.reshape(len(norm_points), k)
        idx = idx.reshape(len(norm_points), k)
        tied = dist <= dist[:, :1] * (1 + 1e-12) + 1e-15
        return np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1).astype(np.int64)


def nearest_cluster(model: ClusterModel, state) -> int:
    """Cluster of a single :class:`CFState`: mapped bin if trained, else nearest centroid."""
    return int(model.assign(np.array([[state.dv, state.d, state.v]], dtype=float))[0])


def _dataset_hash(points: np.ndarray, accels: np.ndarray, offsets: np.ndarray) -> str:
    h = hashlib.sha256()
    for arr in (points, accels, offsets):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def merge_sparse_bins(counts: np.ndarray, raw_sums: np.ndarray, norm_sums: np.ndarray,
                      n_min: int) -> np.ndarray:
    """Iterative batch merging of sparse clusters into their nearest neighbour.

    Works in place on the count and centroid-sum arrays (centroid = sum / count,
    so adding sums is the count-weighted average). Returns the parent array:
    ``parent[i] == i`` for surviving clusters, else the cluster ``i`` merged into.
    """
    m = len(counts)
    parent = np.arange(m)
    alive = np.ones(m, dtype=bool)
    n_batches = 0
    while True:
        sparse = np.nonzero(alive & (counts < n_min))[0]
        if sparse.size == 0:
            break
        live = np.nonzero(alive)[0]
        if live.size == 1:
            break
        tree = cKDTree(norm_sums[live] / counts[live, None])
        k = min(3, live.size)
        dist, pos = tree.query(norm_sums[sparse] / counts[sparse, None], k=k)
        dist = dist.reshape(len(sparse), k)
        nbr = live[pos.reshape(len(sparse), k)]
        # first neighbour that is not the cluster itself
        first = np.argmax(nbr != sparse[:, None], axis=1)
        rows = np.arange(len(sparse))
        dst = nbr[rows, first]
        dd = dist[rows, first]

        order = np.lexsort((sparse, dd, counts[sparse]))
        removed = np.zeros(m, dtype=bool)
        for i in order.tolist():
            s, d = sparse[i], dst[i]
            if removed[s] or removed[d]:
                continue
            counts[d] += counts[s]
            raw_sums[d] += raw_sums[s]
            norm_sums[d] += norm_sums[s]
            alive[s] = False
            removed[s] = True
            parent[s] = d
        n_batches += 1
    logger.debug("clustering finished after %d merge batches", n_batches)
    return parent


def _resolve_roots(parent: np.ndarray) -> np.ndarray:
    root = parent.copy()
    while True:
        nxt = parent[root]
        if np.array_equal(nxt, root):
            return root
        root = nxt


def train_clusters(train: Dataset, grid: StateGrid, n_min: int = N_MIN) -> ClusterModel:
    """Cluster occupied bins until every cluster holds at least ``n_min`` samples.

    Each occupied bin starts as its own cluster; sparse clusters are merged in
    batches into the nearest cluster (range-normalised Euclidean distance),
    then transitions are counted with the final bin-to-cluster map.
    """
    if n_min < 1:
        raise ValueError("n_min must be >= 1")
    points, accels, offsets = state_matrix(train)
    if points.shape[0] < n_min:
        raise TrainingError(f"{points.shape[0]} training states is fewer than n_min={n_min}")
    if not np.all(np.isfinite(points)) or not np.all(np.isfinite(accels)):
        raise TrainingError("training states contain NaN; augment solo series first")

    flat = grid.flat_index(grid.bin_indices(points))
    bins, inverse = np.unique(flat, return_inverse=True)
    m = len(bins)
    counts = np.bincount(inverse, minlength=m).astype(np.int64)
    raw_sums = np.zeros((m, 3))
    np.add.at(raw_sums, inverse, points)
    norm_sums = np.zeros((m, 3))
    np.add.at(norm_sums, inverse, grid.normalize(points))

    parent = merge_sparse_bins(counts, raw_sums, norm_sums, n_min)
    root = _resolve_roots(parent)
    survivors = np.nonzero(root == np.arange(m))[0]
    new_id = np.full(m, -1, dtype=np.int64)
    new_id[survivors] = np.arange(len(survivors))
    bin_ids = new_id[root]

    sample_cluster = bin_ids[inverse]
    order = np.argsort(sample_cluster, kind="stable")
    split_at = np.cumsum(np.bincount(sample_cluster, minlength=len(survivors)))[:-1]
    pools = [accel_distribution(a) for a in np.split(accels[order], split_at)]
    pool_ptr = np.concatenate([[0], np.cumsum([len(p) for p in pools])]).astype(np.int64)

    c = counts[survivors]
    model = ClusterModel(
        grid=grid,
        counts=c,
        centroids=raw_sums[survivors] / c[:, None],
        centroids_norm=norm_sums[survivors] / c[:, None],
        pool_ptr=pool_ptr,
        pool_vals=np.concatenate(pools) if pools else np.zeros(0),
        bin_keys=bins.astype(np.int64),
        bin_ids=bin_ids,
        meta={
            "dataset_hash": _dataset_hash(points, accels, offsets),
            "n_min": int(n_min),
            "ranges": [list(r) for r in grid.ranges],
            "n_samples": int(points.shape[0]),
            "n_pairs": len(train),
            "occupied_bins": int(m),
            "n_clusters": int(len(survivors)),
            "clamped": list(grid.clamped),
        },
    )
    model.transitions = estimate_transitions(train, model, _assigned=(sample_cluster, offsets))
    return model


def estimate_transitions(train: Dataset, model: ClusterModel, _assigned=None) -> TransitionMatrix:
    """Count cluster-to-cluster moves between consecutive steps of each pair and row-normalise."""
    if _assigned is None:
        points, _, offsets = state_matrix(train)
        ids = model.assign(points)
    else:
        ids, offsets = _assigned
    src, dst = [], []
    for a, b in zip(offsets[:-1], offsets[1:]):
        if b - a >= 2:
            src.append(ids[a:b - 1])
            dst.append(ids[a + 1:b])
    src = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
    return TransitionMatrix.from_counts(model.n_clusters, src, dst)


def train_model(train: Dataset, ranges: Sequence[tuple[float, float]] = URBAN_RANGES,
                n_min: int = N_MIN) -> ClusterModel:
    """Grid, clusters and transitions in one call."""
    return train_clusters(train, build_grid(train, ranges), n_min)
