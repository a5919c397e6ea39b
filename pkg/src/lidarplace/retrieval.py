"""Exact nearest-descriptor retrieval and the recall@N evaluation protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import store
from .model import ModelConfig, ModelParams, describe_many

SUCCESS_RADIUS_M = 25.0
MAX_N = 25


@dataclass
class DescriptorIndex:
    ids: list[str]
    run_ids: list[str]
    centroids: np.ndarray  # [n,2]
    descriptors: np.ndarray  # [n,O]
    _rank: np.ndarray = field(init=False, repr=False)
    _sq_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.run_ids = [str(r) for r in self.run_ids]
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise ValueError("index ids must be unique")
        if not (len(self.run_ids) == len(self.centroids) == len(self.descriptors) == n):
            raise ValueError("index columns have different lengths")
        # position of each entry in id order: the tie-break key
        order = sorted(range(n), key=lambda i: self.ids[i])
        self._rank = np.empty(n, dtype=np.int64)
        self._rank[order] = np.arange(n)
        self._sq_norms = np.einsum("ij,ij->i", self.descriptors, self.descriptors) if n else np.empty(0)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1] if self.descriptors.ndim == 2 else 0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DescriptorIndex)
            and self.ids == other.ids
            and self.run_ids == other.run_ids
            and np.array_equal(self.centroids, other.centroids)
            and np.array_equal(self.descriptors, other.descriptors)
        )


def build_index(params: ModelParams, config: ModelConfig, submaps) -> DescriptorIndex:
    submaps = list(submaps)
    descs = describe_many(params, config, [s.cloud for s in submaps]) if submaps else np.empty((0, config.out_dim))
    return DescriptorIndex(
        [s.id for s in submaps],
        [s.run_id for s in submaps],
        np.array([s.centroid_xy for s in submaps], dtype=np.float64).reshape(-1, 2),
        descs,
    )


def index_from_arrays(descriptors, centroids=None, ids=None, run_id="db") -> DescriptorIndex:
    descriptors = np.asarray(descriptors, dtype=np.float64)
    n = len(descriptors)
    ids = [f"{i:08d}" for i in range(n)] if ids is None else list(ids)
    centroids = np.zeros((n, 2)) if centroids is None else centroids
    return DescriptorIndex(ids, [run_id] * n, centroids, descriptors)


def squared_distances(index: DescriptorIndex, query) -> np.ndarray:
    diff = index.descriptors - np.asarray(query, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def query_knn(index: DescriptorIndex, query, k: int) -> list[tuple[str, float]]:
    """The k smallest squared Euclidean distances, ascending, ties by id (linear scan)."""
    n = len(index)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValueError(f"query has shape {query.shape}, index dimension is {index.dim}")
    if k < n:
        # expanded-form distances prefilter the scan; the slack covers their rounding
        # error, so every true top-k entry survives and is then measured exactly
        approx = index._sq_norms - 2.0 * (index.descriptors @ query) + query @ query
        scale = np.sqrt(index._sq_norms.max()) + np.sqrt(query @ query)
        slack = 4.0 * (index.dim + 2) * np.finfo(np.float64).eps * scale * scale
        kth = np.partition(approx, k - 1)[k - 1]
        cand = np.flatnonzero(approx <= kth + 2.0 * slack)
        diff = index.descriptors[cand] - query
        dist = np.einsum("ij,ij->i", diff, diff)
    else:
        cand = np.arange(n)
        dist = squared_distances(index, query)
    order = np.lexsort((index._rank[cand], dist))[:k]
    return [(index.ids[cand[i]], float(dist[i])) for i in order]


@dataclass
class QueryRecord:
    query_id: str
    retrieved: list[str]
    distances: list[float]
    success: list[bool]


@dataclass
class EvalReport:
    recall_at_n: np.ndarray  # [max_n], percent; entry N-1 is recall@N
    recall_top1pct: float
    n_top1pct: int
    database_size: int
    radius_m: float
    queries: list[QueryRecord]

    @property
    def recall_at_1(self) -> float:
        return float(self.recall_at_n[0])


def top1pct_count(database_size: int) -> int:
    return max(1, math.ceil(0.01 * database_size))


def evaluate(index_db: DescriptorIndex, queries, radius_m: float = SUCCESS_RADIUS_M,
             max_n: int = MAX_N) -> EvalReport:
    """``queries``: iterable of (query id, centroid_xy, descriptor).

    Success@N: any of the top N retrieved entries lies within ``radius_m``
    of the query centroid. Recalls are percentages over queries.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("evaluation needs at least one query")
    n_db = len(index_db)
    n1 = top1pct_count(n_db)
    k = min(max(max_n, n1), n_db)
    pos = {sid: i for i, sid in enumerate(index_db.ids)}
    hits = np.zeros((len(queries), max(max_n, n1)), dtype=bool)
    records = []
    for qi, (qid, xy, desc) in enumerate(queries):
        ranked = query_knn(index_db, desc, k)
        near = [
            math.hypot(*(index_db.centroids[pos[sid]] - np.asarray(xy, dtype=np.float64))) <= radius_m
            for sid, _ in ranked
        ]
        first = next((r for r, ok in enumerate(near) if ok), None)
        if first is not None:
            hits[qi, first:] = True
        records.append(QueryRecord(str(qid), [s for s, _ in ranked], [d for _, d in ranked], near))
    curve = hits.mean(axis=0) * 100.0
    return EvalReport(curve[:max_n], float(curve[n1 - 1]), n1, n_db, float(radius_m), records)


def submap_queries(params: ModelParams, config: ModelConfig, submaps):
    submaps = list(submaps)
    descs = describe_many(params, config, [s.cloud for s in submaps])
    return [(s.id, s.centroid_xy, d) for s, d in zip(submaps, descs)]


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``recall_curve.tsv``, ``summary.tsv`` and ``queries.tsv``."""
    out = Path(out_dir)
    curve = ["N\trecall"] + [f"{n}\t{float(r)!r}" for n, r in enumerate(report.recall_at_n, start=1)]
    summary = [
        "key\tvalue",
        f"database_size\t{report.database_size}",
        f"query_count\t{len(report.queries)}",
        f"radius_m\t{report.radius_m!r}",
        f"top1pct_n\t{report.n_top1pct}",
        f"recall_top1pct\t{report.recall_top1pct!r}",
        f"recall_at_1\t{report.recall_at_1!r}",
    ]
    per_query = ["query_id\trank\tretrieved_id\tdistance\tsuccess"]
    for rec in report.queries:
        for rank, (sid, d, ok) in enumerate(zip(rec.retrieved, rec.distances, rec.success), start=1):
            per_query.append(f"{rec.query_id}\t{rank}\t{sid}\t{d!r}\t{int(ok)}")
    paths = [out / "recall_curve.tsv", out / "summary.tsv", out / "queries.tsv"]
    for path, lines in zip(paths, (curve, summary, per_query)):
        store.write_text(path, "\n".join(lines) + "\n")
    return paths


def read_summary(path) -> dict[str, str]:
    rows = store.read_text(path).splitlines()[1:]
    return dict(r.split("\t", 1) for r in rows if r)
