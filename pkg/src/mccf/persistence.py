"""JSON persistence for trained cluster models (schema ``mccf-model/1``).

Floats are written with Python's shortest round-trip representation, so a
load restores every value bit-for-bit and a re-save is byte-identical.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .state_space import ClusterModel, StateGrid, TransitionMatrix

SCHEMA = "mccf-model/1"


class ModelFormatError(ValueError):
    pass


def model_to_dict(model: ClusterModel) -> dict:
    g = model.grid
    clusters = []
    for c in range(model.n_clusters):
        clusters.append({
            "id": c,
            "count": int(model.counts[c]),
            "centroid": [float(x) for x in model.centroids[c]],
            "centroid_norm": [float(x) for x in model.centroids_norm[c]],
            "accel_samples": [float(x) for x in model.pool(c)],
        })
    tm = model.transitions
    rows, counts = {}, {}
    if tm is not None:
        for c in range(tm.n_clusters):
            a, b = int(tm.indptr[c]), int(tm.indptr[c + 1])
            if b > a:
                ids = tm.indices[a:b].tolist()
                rows[str(c)] = [[i, float(p)] for i, p in zip(ids, tm.probs[a:b])]
                counts[str(c)] = [[i, int(n)] for i, n in zip(ids, tm.counts[a:b])]
    return {
        "schema": SCHEMA,
        "grid": {
            "ranges": [[float(lo), float(hi)] for lo, hi in g.ranges],
            "widths": [float(h) for h in g.bin_widths],
            "counts": [int(k) for k in g.bin_counts],
        },
        "clusters": clusters,
        "bin_to_cluster": {str(k): int(v) for k, v in zip(model.bin_keys.tolist(), model.bin_ids.tolist())},
        "transitions": {"rows": rows, "counts": counts},
        "meta": model.meta,
    }


def dumps_model(model: ClusterModel) -> str:
    return json.dumps(model_to_dict(model), separators=(",", ":"), allow_nan=False) + "\n"


def save_model(model: ClusterModel, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ModelFormatError(msg)


def model_from_dict(doc: dict) -> ClusterModel:
    _require(isinstance(doc, dict), "model document must be a JSON object")
    _require(doc.get("schema") == SCHEMA, f"unsupported schema {doc.get('schema')!r}, expected {SCHEMA!r}")
    for key in ("grid", "clusters", "bin_to_cluster", "transitions", "meta"):
        _require(key in doc, f"missing key {key!r}")
    try:
        g = doc["grid"]
        ranges = tuple((float(lo), float(hi)) for lo, hi in g["ranges"])
        grid = StateGrid(ranges, tuple(float(h) for h in g["widths"]), tuple(int(k) for k in g["counts"]))
        _require(len(ranges) == 3 and len(grid.bin_widths) == 3 and len(grid.bin_counts) == 3,
                 "grid must have three dimensions")

        clusters = doc["clusters"]
        n = len(clusters)
        _require(n > 0, "model has no clusters")
        for i, c in enumerate(clusters):
            _require(c["id"] == i, "cluster ids must be 0..n-1 in order")
            _require(len(c["accel_samples"]) > 0, f"cluster {i} has an empty acceleration pool")
        counts = np.array([int(c["count"]) for c in clusters], dtype=np.int64)
        centroids = np.array([c["centroid"] for c in clusters], dtype=float).reshape(n, 3)
        centroids_norm = np.array([c["centroid_norm"] for c in clusters], dtype=float).reshape(n, 3)
        sizes = [len(c["accel_samples"]) for c in clusters]
        pool_ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        pool_vals = np.array([x for c in clusters for x in c["accel_samples"]], dtype=float)

        b2c = doc["bin_to_cluster"]
        bin_keys = np.array([int(k) for k in b2c], dtype=np.int64)
        bin_ids = np.array(list(b2c.values()), dtype=np.int64)
        _require(bool(np.all(np.diff(bin_keys) > 0)), "bin_to_cluster keys must be ascending")
        _require(bool(np.all((bin_ids >= 0) & (bin_ids < n))), "bin_to_cluster references unknown cluster")

        tr = doc["transitions"]
        indptr = np.zeros(n + 1, dtype=np.int64)
        idx, prb, cnt = [], [], []
        for c in range(n):
            row = tr["rows"].get(str(c), [])
            crow = tr["counts"].get(str(c), [])
            _require(len(row) == len(crow), f"transition row {c} count mismatch")
            for (i, p), (j, k) in zip(row, crow):
                _require(i == j and 0 <= i < n, f"bad transition entry in row {c}")
                idx.append(int(i))
                prb.append(float(p))
                cnt.append(int(k))
            indptr[c + 1] = indptr[c] + len(row)
        tm = TransitionMatrix(indptr, np.array(idx, dtype=np.int64),
                              np.array(cnt, dtype=np.int64), np.array(prb, dtype=float))
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ModelFormatError(f"schema violation: {exc}") from exc
    return ClusterModel(grid, counts, centroids, centroids_norm, pool_ptr, pool_vals,
                        bin_keys, bin_ids, tm, dict(doc["meta"]))


def loads_model(text: str) -> ClusterModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def load_model(path: str | Path) -> ClusterModel:
    return loads_model(Path(path).read_text(encoding="utf-8"))
