"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` is an append-only tape. Every call to :meth:`Graph.apply`
evaluates one primitive eagerly, caches its output and returns the integer id
of the new node. :meth:`Graph.backward` walks the tape in reverse and returns
gradients for the trainable parameters registered with :meth:`Graph.param`.

Shape rules
-----------
add, sub, mul
    ``b`` has the shape of ``a``, or the shape of ``a``'s last axis (row
    broadcast), or is a scalar of shape ``()``.
matmul
    2-D ``(n, k) @ (k, m)``.
sum, mean
    reduce everything to shape ``()``.
log, exp, sigmoid, tanh, scale
    elementwise; ``scale`` multiplies by the constant ``factor``.
log_softmax
    along the last axis; the only primitive with a stability guard.
gather_rows
    2-D ``a`` and an integer ``index`` sequence; output ``(len(index), m)``.
concat
    any number of operands joined along axis 0; trailing axes must agree.
transpose
    2-D only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "NonDeterministicError",
    "Graph",
    "GradCheckReport",
    "as_tensor",
    "finite_diff_check",
    "PRIMITIVES",
]


class AutodiffError(ValueError):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(AutodiffError):
    def __init__(self, kind: str, *shapes: tuple[int, ...]):
        self.kind = kind
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {joined}")


class NonFiniteError(AutodiffError):
    pass


class NonDeterministicError(AutodiffError):
    pass


def as_tensor(value) -> np.ndarray:
    """Copy ``value`` into a float64 array, rejecting NaN/Inf."""
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value admitted into graph")
    return arr


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape or b.shape == ():
        return True
    return b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad.reshape(-1, shape[0]).sum(axis=0)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two branches so neither exp overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- forward rules -------------------------------------------------------------


def _fwd_binary(kind, op):
    def fwd(vals, attrs):
        a, b = vals
        if not _broadcast_ok(a, b):
            raise ShapeError(kind, a.shape, b.shape)
        return op(a, b)

    return fwd


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def _fwd_log(vals, attrs):
    (a,) = vals
    if np.any(a <= 0):
        raise NonFiniteError("log: non-positive input")
    return np.log(a)


def _fwd_gather(vals, attrs):
    (a,) = vals
    idx = attrs["index"]
    if a.ndim != 2:
        raise ShapeError("gather_rows", a.shape)
    if len(idx) and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows", a.shape, (int(idx.max()) + 1,))
    return a[idx]


def _fwd_concat(vals, attrs):
    tails = {v.shape[1:] for v in vals}
    if len(tails) != 1 or vals[0].ndim == 0:
        raise ShapeError("concat", *(v.shape for v in vals))
    return np.concatenate(vals, axis=0)


def _fwd_transpose(vals, attrs):
    (a,) = vals
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return a.T.copy()


_FORWARD: dict[str, Callable] = {
    "add": _fwd_binary("add", np.add),
    "sub": _fwd_binary("sub", np.subtract),
    "mul": _fwd_binary("mul", np.multiply),
    "matmul": _fwd_matmul,
    "sum": lambda vals, attrs: np.asarray(vals[0].sum()),
    "mean": lambda vals, attrs: np.asarray(vals[0].mean()),
    "log": _fwd_log,
    "exp": lambda vals, attrs: np.exp(vals[0]),
    "sigmoid": lambda vals, attrs: _sigmoid(vals[0]),
    "tanh": lambda vals, attrs: np.tanh(vals[0]),
    "log_softmax": lambda vals, attrs: _log_softmax(vals[0]),
    "gather_rows": _fwd_gather,
    "concat": _fwd_concat,
    "scale": lambda vals, attrs: vals[0] * attrs["factor"],
    "transpose": _fwd_transpose,
}

_ARITY = {
    "add": 2, "sub": 2, "mul": 2, "matmul": 2, "sum": 1, "mean": 1, "log": 1,
    "exp": 1, "sigmoid": 1, "tanh": 1, "log_softmax": 1, "gather_rows": 1,
    "scale": 1, "transpose": 1,
}

PRIMITIVES = frozenset(_FORWARD)


# -- vector-Jacobian products ------------------------------------------------------


def _vjp(kind, g, vals, out, attrs):
    if kind == "add":
        a, b = vals
        return [g, _unbroadcast(g, b.shape)]
    if kind == "sub":
        a, b = vals
        return [g, -_unbroadcast(g, b.shape)]
    if kind == "mul":
        a, b = vals
        bb = b if b.shape == a.shape else np.broadcast_to(b, a.shape)
        return [g * bb, _unbroadcast(g * a, b.shape)]
    if kind == "matmul":
        a, b = vals
        return [g @ b.T, a.T @ g]
    if kind == "sum":
        return [np.full(vals[0].shape, float(g))]
    if kind == "mean":
        return [np.full(vals[0].shape, float(g) / vals[0].size)]
    if kind == "log":
        return [g / vals[0]]
    if kind == "exp":
        return [g * out]
    if kind == "sigmoid":
        return [g * out * (1.0 - out)]
    if kind == "tanh":
        return [g * (1.0 - out * out)]
    if kind == "log_softmax":
        return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]
    if kind == "gather_rows":
        grad = np.zeros_like(vals[0])
        np.add.at(grad, attrs["index"], g)
        return [grad]
    if kind == "concat":
        grads, start = [], 0
        for v in vals:
            grads.append(g[start:start + v.shape[0]])
            start += v.shape[0]
        return grads
    if kind == "scale":
        return [g * attrs["factor"]]
    if kind == "transpose":
        return [g.T]
    raise AutodiffError(f"no vjp for {kind}")


class Graph:
    """Append-only computation tape.

    Leaves are created with :meth:`param` (named, optionally trainable) and
    :meth:`const`. Every other node comes from :meth:`apply` or one of the
    thin named wrappers (``g.matmul(a, b)`` and so on).
    """

    def __init__(self) -> None:
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.attrs: list[dict] = []
        self.param_ids: dict[str, int] = {}
        self.trainable: set[str] = set()

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, kind, inputs, value, attrs=None) -> int:
        self.kinds.append(kind)
        self.inputs.append(tuple(inputs))
        self.values.append(value)
        self.attrs.append(attrs or {})
        return len(self.values) - 1

    def param(self, name: str, value, trainable: bool = True) -> int:
        if name in self.param_ids:
            raise AutodiffError(f"parameter {name!r} registered twice")
        node = self._push("param", (), as_tensor(value), {"name": name})
        self.param_ids[name] = node
        if trainable:
            self.trainable.add(name)
        return node

    def const(self, value) -> int:
        return self._push("const", (), as_tensor(value))

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def scalar(self, node: int) -> float:
        return float(self.values[node])

    def apply(self, kind: str, *operands: int, **attrs) -> int:
        if kind not in _FORWARD:
            raise AutodiffError(f"unknown primitive {kind!r}")
        arity = _ARITY.get(kind)
        if arity is not None and len(operands) != arity:
            raise AutodiffError(f"{kind} takes {arity} operand(s), got {len(operands)}")
        if not operands:
            raise AutodiffError(f"{kind} needs at least one operand")
        for node in operands:
            if not 0 <= node < len(self.values):
                raise AutodiffError(f"{kind}: unknown node id {node}")
        if kind == "gather_rows":
            attrs["index"] = np.asarray(attrs["index"], dtype=np.int64).reshape(-1)
        if kind == "scale":
            attrs["factor"] = float(attrs["factor"])
        vals = [self.values[i] for i in operands]
        with np.errstate(all="ignore"):
            out = np.asarray(_FORWARD[kind](vals, attrs), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{kind} produced a non-finite value")
        return self._push(kind, operands, out, attrs)

    # named wrappers keep call sites readable
    def add(self, a, b): return self.apply("add", a, b)
    def sub(self, a, b): return self.apply("sub", a, b)
    def mul(self, a, b): return self.apply("mul", a, b)
    def matmul(self, a, b): return self.apply("matmul", a, b)
    def sum(self, a): return self.apply("sum", a)
    def mean(self, a): return self.apply("mean", a)
    def log(self, a): return self.apply("log", a)
    def exp(self, a): return self.apply("exp", a)
    def sigmoid(self, a): return self.apply("sigmoid", a)
    def tanh(self, a): return self.apply("tanh", a)
    def log_softmax(self, a): return self.apply("log_softmax", a)
    def gather_rows(self, a, index): return self.apply("gather_rows", a, index=index)
    def concat(self, *nodes): return self.apply("concat", *nodes)
    def scale(self, a, factor): return self.apply("scale", a, factor=factor)
    def transpose(self, a): return self.apply("transpose", a)

    def backward(self, root: int) -> dict[str, np.ndarray]:
        """Return d(root)/d(param) for every trainable parameter.

        Frozen parameters and constants receive nothing; callers treat an
        absent entry as a zero gradient. The tape is not mutated, so repeated
        calls give identical results.
        """
        if self.values[root].shape != ():
            raise AutodiffError(f"backward needs a scalar root, got shape {self.values[root].shape}")
        grads: list[np.ndarray | None] = [None] * (root + 1)
        grads[root] = np.ones(())
        for node in range(root, -1, -1):
            g = grads[node]
            if g is None or not self.inputs[node]:
                continue
            vals = [self.values[i] for i in self.inputs[node]]
            parts = _vjp(self.kinds[node], g, vals, self.values[node], self.attrs[node])
            for src, part in zip(self.inputs[node], parts):
                grads[src] = part if grads[src] is None else grads[src] + part
        out = {}
        for name in sorted(self.trainable):
            node = self.param_ids[name]
            g = grads[node] if node <= root else None
            out[name] = np.zeros_like(self.values[node]) if g is None else np.asarray(g, dtype=np.float64)
        return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    offending: str | None
    offending_index: tuple[int, ...] | None
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


LossFn = Callable[[Mapping[str, np.ndarray]], tuple[Graph, int]]


def finite_diff_check(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences element by element.

    ``loss_fn`` receives a name -> array mapping and returns ``(graph, root)``.
    Only parameters the graph marks trainable are perturbed unless ``names``
    restricts the set further. ``tol`` is informational; inspect
    ``report.passed(tol)``.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"step h={h} outside (0, 1e-2]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    graph, root = loss_fn(base)
    again, root2 = loss_fn(base)
    if graph.scalar(root) != again.scalar(root2):
        raise NonDeterministicError("loss_fn returned different values for identical inputs")
    analytic = graph.backward(root)
    targets = sorted(analytic) if names is None else [n for n in names if n in analytic]

    def f(trial):
        g, r = loss_fn(trial)
        return g.scalar(r)

    worst, worst_name, worst_idx, count = 0.0, None, None, 0
    for name in targets:
        arr = base[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = f(base)
            arr[idx] = orig - h
            down = f(base)
            arr[idx] = orig
            numeric = (up - down) / (2 * h)
            exact = float(analytic[name][idx])
            denom = max(abs(exact), abs(numeric), 1e-8)
            rel = abs(exact - numeric) / denom
            count += 1
            if rel > worst or worst_name is None:
                worst, worst_name, worst_idx = rel, name, tuple(int(i) for i in idx)
    if math.isnan(worst):
        worst = math.inf
    return GradCheckReport(worst, worst_name, worst_idx, count)
