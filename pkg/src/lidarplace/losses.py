"""Triplet / quadruplet hinge objectives over squared descriptor distances.

The lazy variants keep only the hardest (max) violation per tuple; the
original variants sum every violation. Scalar mirrors operate on
:class:`TupleDistances`; the graph builders record the same algebra on a tape
so gradients reach the descriptors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Graph

LOSS_KINDS = ("triplet", "quadruplet", "lazy_triplet", "lazy_quadruplet")
QUADRUPLET_KINDS = ("quadruplet", "lazy_quadruplet")


@dataclass(frozen=True)
class Margins:
    alpha: float = 0.5
    beta: float = 0.2

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"margins must be positive, got alpha={self.alpha}, beta={self.beta}")


@dataclass(frozen=True)
class TupleDistances:
    delta_pos: float
    delta_neg: tuple[float, ...]
    delta_neg_star: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "delta_neg", tuple(float(v) for v in self.delta_neg))
        object.__setattr__(self, "delta_neg_star", tuple(float(v) for v in self.delta_neg_star))
        values = (self.delta_pos, *self.delta_neg, *self.delta_neg_star)
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ValueError("tuple distances must be finite and non-negative")


def sq_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"descriptor length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff.ravel(), diff.ravel()))


def _hinges(margin, delta_pos, deltas):
    return [max(margin + delta_pos - d, 0.0) for d in deltas]


def _require_negatives(d: TupleDistances, quad: bool):
    if not d.delta_neg:
        raise ValueError("at least one negative distance is required")
    if quad and len(d.delta_neg_star) != len(d.delta_neg):
        raise ValueError(
            f"delta_neg_star needs {len(d.delta_neg)} entries, got {len(d.delta_neg_star)}"
        )


def lazy_triplet(d: TupleDistances, m: Margins = Margins()) -> float:
    _require_negatives(d, quad=False)
    return max(_hinges(m.alpha, d.delta_pos, d.delta_neg))


def lazy_quadruplet(d: TupleDistances, m: Margins = Margins()) -> float:
    _require_negatives(d, quad=True)
    return max(_hinges(m.alpha, d.delta_pos, d.delta_neg)) + max(
        _hinges(m.beta, d.delta_pos, d.delta_neg_star)
    )


def sum_triplet(d: TupleDistances, m: Margins = Margins()) -> float:
    _require_negatives(d, quad=False)
    return sum(_hinges(m.alpha, d.delta_pos, d.delta_neg))


def sum_quadruplet(d: TupleDistances, m: Margins = Margins()) -> float:
    _require_negatives(d, quad=True)
    return sum(_hinges(m.alpha, d.delta_pos, d.delta_neg)) + sum(
        _hinges(m.beta, d.delta_pos, d.delta_neg_star)
    )


SCALAR_LOSSES = {
    "triplet": sum_triplet,
    "quadruplet": sum_quadruplet,
    "lazy_triplet": lazy_triplet,
    "lazy_quadruplet": lazy_quadruplet,
}


def tuple_distances(anchor, positive, negatives, neg_star=None) -> TupleDistances:
    """Scalar mirror of the distances the graph loss computes."""
    negatives = list(negatives)
    star = () if neg_star is None else tuple(sq_euclidean(neg_star, n) for n in negatives)
    return TupleDistances(
        sq_euclidean(anchor, positive), tuple(sq_euclidean(anchor, n) for n in negatives), star
    )


# -- graph versions ------------------------------------------------------------


def _row_sq_dists(graph: Graph, row: int, block: int, n: int) -> int:
    """[n] squared distances from a [1,O] row node to each row of an [n,O] block."""
    ones = graph.const(np.ones((n, 1)))
    diff = graph.sub(block, graph.matmul(ones, row))
    return graph.sum_rows(graph.mul(diff, diff))


def _hinge_terms(graph: Graph, margin: float, delta_pos: int, deltas: int, n: int) -> int:
    pos = graph.reshape(graph.matmul(graph.const(np.ones((n, 1))), graph.reshape(delta_pos, (1, 1))), (n,))
    return graph.relu(graph.add(graph.sub(pos, deltas), graph.const(np.full(n, margin))))


def tuple_loss_node(
    graph: Graph,
    descriptors: int,
    offset: int,
    n_neg: int,
    kind: str,
    margins: Margins = Margins(),
) -> int:
    """Loss of one tuple laid out as rows [anchor, positive, negatives..., (neg_star)].

    ``offset`` is the anchor's row in the ``descriptors`` node. Returns a [1] node.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {kind!r}; valid: {', '.join(LOSS_KINDS)}")
    if n_neg < 1:
        raise ValueError("at least one negative is required")
    anchor = graph.slice_rows(descriptors, offset, offset + 1)
    positive = graph.slice_rows(descriptors, offset + 1, offset + 2)
    negs = graph.slice_rows(descriptors, offset + 2, offset + 2 + n_neg)
    diff = graph.sub(anchor, positive)
    delta_pos = graph.sum_rows(graph.mul(diff, diff))
    delta_neg = _row_sq_dists(graph, anchor, negs, n_neg)

    reduce = graph.max_rows if kind.startswith("lazy") else graph.sum_rows
    loss = reduce(_hinge_terms(graph, margins.alpha, delta_pos, delta_neg, n_neg))
    if kind in QUADRUPLET_KINDS:
        star = graph.slice_rows(descriptors, offset + 2 + n_neg, offset + 3 + n_neg)
        delta_star = _row_sq_dists(graph, star, negs, n_neg)
        loss = graph.add(loss, reduce(_hinge_terms(graph, margins.beta, delta_pos, delta_star, n_neg)))
    return loss


def batch_loss_node(
    graph: Graph,
    descriptors: int,
    n_tuples: int,
    n_neg: int,
    kind: str,
    margins: Margins = Margins(),
) -> int:
    """Mean tuple loss over a batch of equally shaped tuples stacked row-wise."""
    rows = tuple_rows(n_neg, kind)
    per_tuple = [tuple_loss_node(graph, descriptors, t * rows, n_neg, kind, margins) for t in range(n_tuples)]
    total = graph.sum_rows(graph.concat(per_tuple)) if n_tuples > 1 else per_tuple[0]
    return graph.scale(total, 1.0 / n_tuples)


def tuple_rows(n_neg: int, kind: str) -> int:
    return 2 + n_neg + (1 if kind in QUADRUPLET_KINDS else 0)


def scalar_loss(kind: str, d: TupleDistances, m: Margins = Margins()) -> float:
    try:
        fn = SCALAR_LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}; valid: {', '.join(LOSS_KINDS)}") from None
    return fn(d, m)

