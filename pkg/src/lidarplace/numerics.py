"""Taped reverse-mode autodiff over a small set of dense float64 kernels.

Values are numpy arrays (float64, row-major, read-only once recorded).
Every ``apply`` evaluates eagerly and appends a node to the graph; ``backward``
sweeps the tape in reverse and accumulates gradients on trainable leaves.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12


class Kind(enum.Enum):
    LEAF = "Leaf"
    MATMUL = "MatMul"
    AFFINE_ROWS = "AffineRows"
    RELU = "ReLU"
    SOFTMAX_ROWS = "SoftmaxRows"
    SUM_ROWS = "SumRows"
    L2_NORMALIZE_VEC = "L2NormalizeVec"
    L2_NORMALIZE_ROWS = "L2NormalizeRows"
    MAX_ROWS = "MaxRows"
    CONCAT = "Concat"
    SCALE = "Scale"
    SUB = "Sub"
    ADD = "Add"
    MUL = "Mul"
    TRANSPOSE = "Transpose"
    RESHAPE = "Reshape"
    SLICE_ROWS = "SliceRows"
    SCALE_ROWS = "ScaleRows"


class ShapeError(ValueError):
    pass


def as_tensor(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, order="C")
    arr.flags.writeable = False
    return arr


@dataclass(eq=False)
class Node:
    id: int
    kind: Kind
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False
    grad: np.ndarray | None = None


def _mismatch(kind: Kind, *shapes) -> ShapeError:
    shown = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{kind.value}: incompatible shapes {shown}")


def _rows_view(x: np.ndarray) -> np.ndarray:
    # rank-1 inputs reduce as a single row
    return x.reshape(1, -1) if x.ndim == 1 else x


# -- forward kernels & vector-Jacobian products --------------------------------
# Each forward takes (input values, attrs) and returns the output value.
# Each vjp takes (upstream grad, input values, output value, attrs) and returns
# one gradient per input.


def _check_rank(kind, x, ranks):
    if x.ndim not in ranks:
        raise _mismatch(kind, x.shape)


def _fwd_matmul(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _mismatch(Kind.MATMUL, a.shape, b.shape)
    return a @ b


def _vjp_matmul(g, xs, out, attrs):
    a, b = xs
    return [g @ b.T, a.T @ g]


def _fwd_affine(xs, attrs):
    x, w, b = xs
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _mismatch(Kind.AFFINE_ROWS, x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise _mismatch(Kind.AFFINE_ROWS, w.shape, b.shape)
    return x @ w + b


def _vjp_affine(g, xs, out, attrs):
    x, w, b = xs
    return [g @ w.T, x.T @ g, g.sum(axis=0)]


def _fwd_relu(xs, attrs):
    return np.maximum(xs[0], 0.0)


def _vjp_relu(g, xs, out, attrs):
    return [g * (xs[0] > 0.0)]


def _fwd_softmax(xs, attrs):
    x = xs[0]
    _check_rank(Kind.SOFTMAX_ROWS, x, (2,))
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _vjp_softmax(g, xs, out, attrs):
    return [out * (g - (g * out).sum(axis=1, keepdims=True))]


def _fwd_sum_rows(xs, attrs):
    x = xs[0]
    _check_rank(Kind.SUM_ROWS, x, (1, 2))
    return _rows_view(x).sum(axis=1)


def _vjp_sum_rows(g, xs, out, attrs):
    x = xs[0]
    return [np.broadcast_to(g[:, None], _rows_view(x).shape).reshape(x.shape).copy()]


def _fwd_max_rows(xs, attrs):
    x = xs[0]
    _check_rank(Kind.MAX_ROWS, x, (1, 2))
    return _rows_view(x).max(axis=1)


def _vjp_max_rows(g, xs, out, attrs):
    x = _rows_view(xs[0])
    # argmax returns the first maximal index: ties go to the lowest index
    idx = x.argmax(axis=1)
    gx = np.zeros_like(x)
    gx[np.arange(x.shape[0]), idx] = g
    return [gx.reshape(xs[0].shape)]


def _normalize(x):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return norms, np.maximum(norms, EPS_NORM)


def _fwd_l2_vec(xs, attrs):
    x = xs[0]
    _check_rank(Kind.L2_NORMALIZE_VEC, x, (1,))
    _, denom = _normalize(x.reshape(1, -1))
    return x / denom[0, 0]


def _fwd_l2_rows(xs, attrs):
    x = xs[0]
    _check_rank(Kind.L2_NORMALIZE_ROWS, x, (2,))
    _, denom = _normalize(x)
    return x / denom


def _vjp_l2(g, xs, out, attrs):
    x = _rows_view(xs[0])
    y = _rows_view(out)
    gg = _rows_view(g)
    norms, denom = _normalize(x)
    projected = gg - y * (y * gg).sum(axis=1, keepdims=True)
    # below eps the map is linear (x / eps)
    gx = np.where(norms > EPS_NORM, projected, gg) / denom
    return [gx.reshape(xs[0].shape)]


def _fwd_concat(xs, attrs):
    if not xs:
        raise ShapeError("Concat: no inputs")
    tail = xs[0].shape[1:]
    for x in xs:
        if x.ndim != xs[0].ndim or x.shape[1:] != tail:
            raise _mismatch(Kind.CONCAT, xs[0].shape, x.shape)
    return np.concatenate(xs, axis=0)


def _vjp_concat(g, xs, out, attrs):
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    return [g[bounds[i] : bounds[i + 1]] for i in range(len(xs))]


def _fwd_scale(xs, attrs):
    return xs[0] * float(attrs["factor"])


def _vjp_scale(g, xs, out, attrs):
    return [g * float(attrs["factor"])]


def _same_shape(kind):
    def check(xs):
        a, b = xs
        if a.shape != b.shape:
            raise _mismatch(kind, a.shape, b.shape)

    return check


def _fwd_sub(xs, attrs):
    _same_shape(Kind.SUB)(xs)
    return xs[0] - xs[1]


def _fwd_add(xs, attrs):
    _same_shape(Kind.ADD)(xs)
    return xs[0] + xs[1]


def _fwd_mul(xs, attrs):
    _same_shape(Kind.MUL)(xs)
    return xs[0] * xs[1]


def _fwd_transpose(xs, attrs):
    _check_rank(Kind.TRANSPOSE, xs[0], (2,))
    return xs[0].T


def _fwd_reshape(xs, attrs):
    shape = tuple(int(s) for s in attrs["shape"])
    if int(np.prod(shape)) != xs[0].size:
        raise _mismatch(Kind.RESHAPE, xs[0].shape, shape)
    return xs[0].reshape(shape)


def _fwd_slice_rows(xs, attrs):
    x = xs[0]
    start, stop = int(attrs["start"]), int(attrs["stop"])
    if x.ndim < 1 or not 0 <= start < stop <= x.shape[0]:
        raise _mismatch(Kind.SLICE_ROWS, x.shape, (start, stop))
    return x[start:stop]


def _vjp_slice_rows(g, xs, out, attrs):
    gx = np.zeros_like(xs[0])
    gx[int(attrs["start"]) : int(attrs["stop"])] = g
    return [gx]


def _fwd_scale_rows(xs, attrs):
    x, s = xs
    if x.ndim != 2 or s.shape != (x.shape[0],):
        raise _mismatch(Kind.SCALE_ROWS, x.shape, s.shape)
    return x * s[:, None]


def _vjp_scale_rows(g, xs, out, attrs):
    x, s = xs
    return [g * s[:, None], (g * x).sum(axis=1)]


KERNELS: dict[Kind, tuple[Callable, Callable, int | None]] = {
    Kind.MATMUL: (_fwd_matmul, _vjp_matmul, 2),
    Kind.AFFINE_ROWS: (_fwd_affine, _vjp_affine, 3),
    Kind.RELU: (_fwd_relu, _vjp_relu, 1),
    Kind.SOFTMAX_ROWS: (_fwd_softmax, _vjp_softmax, 1),
    Kind.SUM_ROWS: (_fwd_sum_rows, _vjp_sum_rows, 1),
    Kind.L2_NORMALIZE_VEC: (_fwd_l2_vec, _vjp_l2, 1),
    Kind.L2_NORMALIZE_ROWS: (_fwd_l2_rows, _vjp_l2, 1),
    Kind.MAX_ROWS: (_fwd_max_rows, _vjp_max_rows, 1),
    Kind.CONCAT: (_fwd_concat, _vjp_concat, None),
    Kind.SCALE: (_fwd_scale, _vjp_scale, 1),
    Kind.SUB: (_fwd_sub, lambda g, xs, out, attrs: [g, -g], 2),
    Kind.ADD: (_fwd_add, lambda g, xs, out, attrs: [g, g], 2),
    Kind.MUL: (_fwd_mul, lambda g, xs, out, attrs: [g * xs[1], g * xs[0]], 2),
    Kind.TRANSPOSE: (_fwd_transpose, lambda g, xs, out, attrs: [g.T], 1),
    Kind.RESHAPE: (_fwd_reshape, lambda g, xs, out, attrs: [g.reshape(xs[0].shape)], 1),
    Kind.SLICE_ROWS: (_fwd_slice_rows, _vjp_slice_rows, 1),
    Kind.SCALE_ROWS: (_fwd_scale_rows, _vjp_scale_rows, 2),
}


def _resolve_kind(kind) -> Kind:
    if isinstance(kind, Kind):
        resolved = kind
    else:
        try:
            resolved = Kind(kind)
        except ValueError:
            raise ValueError(f"unknown primitive kind {kind!r}") from None
    if resolved not in KERNELS:
        raise ValueError(f"{resolved.value} is not an applicable primitive")
    return resolved


class Graph:
    """Append-only tape. Single-threaded; use one graph per computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: set[int] = set()

    def __len__(self):
        return len(self.nodes)

    # -- leaves --
    def leaf(self, value, trainable: bool = False) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, Kind.LEAF, (), as_tensor(value), requires_grad=trainable))
        if trainable:
            self.parameters.add(nid)
        return nid

    def param(self, value) -> int:
        return self.leaf(value, trainable=True)

    def const(self, value) -> int:
        return self.leaf(value, trainable=False)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def grad(self, nid: int) -> np.ndarray:
        node = self.nodes[nid]
        if node.grad is None:
            return np.zeros_like(node.value)
        return node.grad

    # -- primitives --
    def apply(self, kind, inputs: Sequence[int], **attrs) -> int:
        kind = _resolve_kind(kind)
        forward, _, arity = KERNELS[kind]
        inputs = tuple(int(i) for i in inputs)
        if arity is not None and len(inputs) != arity:
            raise ShapeError(f"{kind.value}: expected {arity} inputs, got {len(inputs)}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{kind.value}: unknown input node {i}")
        values = [self.nodes[i].value for i in inputs]
        out = forward(values, attrs)
        out = np.ascontiguousarray(out, dtype=np.float64)
        out.flags.writeable = False
        nid = len(self.nodes)
        requires = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(nid, kind, inputs, out, dict(attrs), requires_grad=requires))
        return nid

    def matmul(self, a, b):
        return self.apply(Kind.MATMUL, [a, b])

    def affine_rows(self, x, w, b):
        return self.apply(Kind.AFFINE_ROWS, [x, w, b])

    def relu(self, x):
        return self.apply(Kind.RELU, [x])

    def softmax_rows(self, x):
        return self.apply(Kind.SOFTMAX_ROWS, [x])

    def sum_rows(self, x):
        return self.apply(Kind.SUM_ROWS, [x])

    def max_rows(self, x):
        return self.apply(Kind.MAX_ROWS, [x])

    def l2_normalize_vec(self, x):
        return self.apply(Kind.L2_NORMALIZE_VEC, [x])

    def l2_normalize_rows(self, x):
        return self.apply(Kind.L2_NORMALIZE_ROWS, [x])

    def concat(self, xs):
        return self.apply(Kind.CONCAT, list(xs))

    def scale(self, x, factor):
        return self.apply(Kind.SCALE, [x], factor=float(factor))

    def sub(self, a, b):
        return self.apply(Kind.SUB, [a, b])

    def add(self, a, b):
        return self.apply(Kind.ADD, [a, b])

    def mul(self, a, b):
        return self.apply(Kind.MUL, [a, b])

    def transpose(self, x):
        return self.apply(Kind.TRANSPOSE, [x])

    def reshape(self, x, shape):
        return self.apply(Kind.RESHAPE, [x], shape=tuple(shape))

    def slice_rows(self, x, start, stop):
        return self.apply(Kind.SLICE_ROWS, [x], start=start, stop=stop)

    def scale_rows(self, x, s):
        return self.apply(Kind.SCALE_ROWS, [x, s])

    # -- reverse sweep --
    def backward(self, loss: int) -> None:
        """Accumulate d(loss)/d(param) into ``grad`` of every parameter leaf."""
        root = self.nodes[loss]
        if root.value.size != 1 or root.value.ndim > 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {root.value.shape}")
        for nid in self.parameters:
            self.nodes[nid].grad = np.zeros_like(self.nodes[nid].value)
        if not root.requires_grad:
            return
        grads: dict[int, np.ndarray] = {loss: np.ones_like(root.value)}
        owned: set[int] = set()  # buffers safe to update in place
        for nid in range(loss, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.kind is Kind.LEAF:
                if nid in self.parameters:
                    node.grad = node.grad + g
                continue
            if node.kind is Kind.SLICE_ROWS:
                # scatter into one buffer instead of a dense zero tensor per slice
                src = node.inputs[0]
                if not self.nodes[src].requires_grad:
                    continue
                if src not in grads:
                    grads[src] = np.zeros_like(self.nodes[src].value)
                    owned.add(src)
                elif src not in owned:
                    grads[src] = grads[src].copy()
                    owned.add(src)
                grads[src][int(node.attrs["start"]) : int(node.attrs["stop"])] += g
                continue
            _, vjp, _ = KERNELS[node.kind]
            values = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, vjp(g, values, node.value, node.attrs)):
                if not self.nodes[i].requires_grad:
                    continue
                if i in owned:
                    grads[i] += gi
                elif i in grads:
                    grads[i] = grads[i] + gi
                    owned.add(i)
                else:
                    grads[i] = gi


def apply(graph: Graph, kind, inputs: Sequence[int], **attrs) -> int:
    return graph.apply(kind, inputs, **attrs)


def backward(graph: Graph, loss: int) -> None:
    graph.backward(loss)


def _loss_value(build, params):
    graph = Graph()
    ids = [graph.const(p) for p in params]
    return float(graph.value(build(graph, ids)).reshape(-1)[0])


def grad_check(
    build: Callable[[Graph, list[int]], int],
    params: Sequence[np.ndarray],
    h: float = 1e-6,
    kink_tol: float = 1e-4,
) -> float:
    """Max relative error between backprop and central differences.

    ``build(graph, param_ids)`` must return the id of a scalar loss node.
    Relative error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    Entries whose one-sided differences disagree by more than ``kink_tol``
    sit within ``h`` of a kink and are skipped.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"step h must lie in (0, 1e-3], got {h}")
    params = [np.array(p, dtype=np.float64, order="C") for p in params]
    if not params or all(p.size == 0 for p in params):
        return 0.0

    graph = Graph()
    ids = [graph.param(p) for p in params]
    loss = build(graph, ids)
    graph.backward(loss)
    analytic = [graph.grad(i) for i in ids]
    f0 = float(graph.value(loss).reshape(-1)[0])

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = _loss_value(build, params)
            flat[j] = orig - h
            fm = _loss_value(build, params)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            if abs((fp - f0) - (f0 - fm)) / h > kink_tol * max(1.0, abs(numeric)):
                continue
            worst = max(worst, abs(gflat[j] - numeric) / max(1.0, abs(numeric)))
    return worst
