"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are define-by-run and append-only: node ids are indices into the
insertion-ordered node list, so reverse insertion order is already a valid
backward traversal.  Tensors are 1-D or 2-D C-contiguous float64 ndarrays;
the only broadcasting allowed is bias addition (a vector added to each row
of a matrix, or a 1-element tensor added to a vector).  Everything else is
a shape error, which keeps every gradient formula below auditable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "leaf",
    "matmul",
    "add",
    "sigmoid",
    "tanh",
    "softmax",
    "hadamard",
    "concat",
    "mean",
    "weighted_sum",
    "cross_entropy",
    "scale",
)


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array of rank <= 2."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise ValueError(f"tensors must be rank <= 2, got shape {a.shape}")
    return a


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """sigmoid(x) = 1/(1+e^-x), overflow-free for |x| up to float64 range."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_softmax(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class Node:
    id: int
    op: str
    parents: list[int]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    grad: np.ndarray | None = None


class Graph:
    """Append-only computation graph confined to one thread."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def _append(self, op: str, parents: list[int], value: np.ndarray, attrs: dict) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, parents, value, attrs))
        return nid

    def leaf(self, value) -> int:
        return self._append("leaf", [], as_tensor(value), {})

    def apply(self, op_kind: str, inputs: Sequence[int], **attrs) -> int:
        """Append a node computing ``op_kind`` over existing node ids."""
        if op_kind not in OP_KINDS:
            raise ValueError(f"unknown op_kind {op_kind!r}")
        if op_kind == "leaf":
            raise ValueError("use Graph.leaf() to create leaves")
        for nid in inputs:
            if not 0 <= nid < len(self.nodes):
                raise ValueError(f"input node id {nid} does not exist")
        vals = [self.nodes[nid].value for nid in inputs]
        value = _FORWARD[op_kind](vals, attrs)
        return self._append(op_kind, list(inputs), value, attrs)

    # Helpers mirroring the op set; each is just apply() with arity pinned.
    def matmul(self, a: int, b: int) -> int:
        return self.apply("matmul", [a, b])

    def add(self, a: int, b: int) -> int:
        return self.apply("add", [a, b])

    def sigmoid(self, x: int) -> int:
        return self.apply("sigmoid", [x])

    def tanh(self, x: int) -> int:
        return self.apply("tanh", [x])

    def softmax(self, x: int) -> int:
        return self.apply("softmax", [x])

    def hadamard(self, a: int, b: int) -> int:
        return self.apply("hadamard", [a, b])

    def concat(self, xs: Sequence[int], axis: int = 0) -> int:
        return self.apply("concat", list(xs), axis=axis)

    def mean(self, x: int, axis: int | None = None) -> int:
        return self.apply("mean", [x], axis=axis)

    def weighted_sum(self, weights: int, xs: Sequence[int]) -> int:
        return self.apply("weighted_sum", [weights, *xs])

    def cross_entropy(self, probs: int, label: int) -> int:
        return self.apply("cross_entropy", [probs], label=label)

    def scale(self, x: int, factor: float) -> int:
        return self.apply("scale", [x], factor=factor)

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Gradient of a scalar-shaped loss node w.r.t. every leaf.

        Gradients accumulate over fan-out; values are untouched, so further
        nodes may be appended and backward run again.
        """
        root = self.nodes[loss]
        if root.value.size != 1:
            raise ValueError(f"loss must be scalar-shaped, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: loss + 1]):
            if node.grad is None or node.op == "leaf":
                continue
            parent_vals = [self.nodes[p].value for p in node.parents]
            pgrads = _BACKWARD[node.op](node.grad, node.value, parent_vals, node.attrs)
            for pid, g in zip(node.parents, pgrads):
                if g is None:
                    continue
                parent = self.nodes[pid]
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += g
        out = {}
        for node in self.nodes:
            if node.op == "leaf":
                out[node.id] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


# ---------------------------------------------------------------------------
# Forward implementations
# ---------------------------------------------------------------------------


def _shape_err(op: str, shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


def _fw_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", [a.shape, b.shape])
    return a @ b


def _fw_add(vals, attrs):
    a, b = vals
    if a.shape == b.shape:
        return a + b
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return a + b  # bias vector added to each row
    if a.ndim == 1 and b.size == 1:
        return a + b.reshape(())
    raise _shape_err("add", [a.shape, b.shape])


def _fw_sigmoid(vals, attrs):
    return stable_sigmoid(vals[0])


def _fw_tanh(vals, attrs):
    return np.tanh(vals[0])


def _fw_softmax(vals, attrs):
    x = vals[0]
    if x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    return stable_softmax(x)


def _fw_hadamard(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise _shape_err("hadamard", [a.shape, b.shape])
    return a * b


def _fw_concat(vals, attrs):
    axis = attrs.get("axis", 0)
    ranks = {v.ndim for v in vals}
    if len(ranks) != 1 or axis >= ranks.pop():
        raise _shape_err("concat", [v.shape for v in vals])
    return np.concatenate(vals, axis=axis)


def _fw_mean(vals, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is None:
        return np.array([x.mean()])
    if x.ndim != 2 or axis != 0:
        raise _shape_err("mean(axis=0)", [x.shape])
    return x.mean(axis=0)


def _fw_weighted_sum(vals, attrs):
    w = vals[0]
    if w.ndim != 1:
        raise _shape_err("weighted_sum", [v.shape for v in vals])
    if len(vals) == 2 and vals[1].ndim == 2:
        m = vals[1]
        if m.shape[0] != w.shape[0]:
            raise _shape_err("weighted_sum", [w.shape, m.shape])
        return w @ m
    xs = vals[1:]
    if len(xs) != w.shape[0] or any(x.shape != xs[0].shape for x in xs):
        raise _shape_err("weighted_sum", [v.shape for v in vals])
    out = np.zeros_like(xs[0])
    for wi, x in zip(w, xs):
        out += wi * x
    return out


def _fw_cross_entropy(vals, attrs):
    p = vals[0]
    label = attrs["label"]
    if p.ndim != 1 or not 0 <= label < p.shape[0]:
        raise ValueError(f"cross_entropy: label {label} out of range for shape {p.shape}")
    return np.array([-np.log(p[label])])


def _fw_scale(vals, attrs):
    return vals[0] * float(attrs["factor"])


_FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "sigmoid": _fw_sigmoid,
    "tanh": _fw_tanh,
    "softmax": _fw_softmax,
    "hadamard": _fw_hadamard,
    "concat": _fw_concat,
    "mean": _fw_mean,
    "weighted_sum": _fw_weighted_sum,
    "cross_entropy": _fw_cross_entropy,
    "scale": _fw_scale,
}


# ---------------------------------------------------------------------------
# Backward implementations: (g, value, parent_values, attrs) -> parent grads
# ---------------------------------------------------------------------------


def _bw_matmul(g, y, vals, attrs):
    a, b = vals
    if b.ndim == 1:
        return [np.outer(g, b), a.T @ g]
    return [g @ b.T, a.T @ g]


def _bw_add(g, y, vals, attrs):
    a, b = vals
    if a.shape == b.shape:
        return [g, g]
    if a.ndim == 2 and b.ndim == 1:
        return [g, g.sum(axis=0)]
    return [g, np.full_like(b, g.sum()).reshape(b.shape)]


def _bw_sigmoid(g, y, vals, attrs):
    return [g * y * (1.0 - y)]


def _bw_tanh(g, y, vals, attrs):
    return [g * (1.0 - y * y)]


def _bw_softmax(g, y, vals, attrs):
    # Jacobian-vector product: y * (g - <g, y>) along the softmax axis.
    dot = np.sum(g * y, axis=-1, keepdims=True)
    return [y * (g - dot)]


def _bw_hadamard(g, y, vals, attrs):
    a, b = vals
    return [g * b, g * a]


def _bw_concat(g, y, vals, attrs):
    axis = attrs.get("axis", 0)
    sizes = [v.shape[axis] for v in vals]
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _bw_mean(g, y, vals, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is None:
        return [np.full_like(x, g.reshape(()) / x.size)]
    return [np.tile(g / x.shape[0], (x.shape[0], 1))]


def _bw_weighted_sum(g, y, vals, attrs):
    w = vals[0]
    if len(vals) == 2 and vals[1].ndim == 2:
        m = vals[1]
        return [m @ g, np.outer(w, g)]
    xs = vals[1:]
    gw = np.array([np.sum(g * x) for x in xs])
    return [gw] + [wi * g for wi in w]


def _bw_cross_entropy(g, y, vals, attrs):
    p = vals[0]
    label = attrs["label"]
    gp = np.zeros_like(p)
    gp[label] = -g.reshape(())[()] / p[label]
    return [gp]


def _bw_scale(g, y, vals, attrs):
    return [g * float(attrs["factor"])]


_BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "softmax": _bw_softmax,
    "hadamard": _bw_hadamard,
    "concat": _bw_concat,
    "mean": _bw_mean,
    "weighted_sum": _bw_weighted_sum,
    "cross_entropy": _bw_cross_entropy,
    "scale": _bw_scale,
}


def grad_check(
    fn: Callable[[Graph, list[int]], int],
    point: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` receives a fresh graph plus leaf ids created from ``point`` and
    returns the loss node id.  The denominator is guarded at 1e-8 so exactly
    zero gradients compare as zero error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = [as_tensor(p) for p in point]

    def run(values: Sequence[np.ndarray]):
        g = Graph()
        leaves = [g.leaf(v) for v in values]
        loss = fn(g, leaves)
        return g, leaves, loss

    g, leaves, loss = run(point)
    grads = g.backward(loss)
    worst = 0.0
    for i, base in enumerate(point):
        analytic = grads[leaves[i]]
        flat = base.ravel()
        for j in range(flat.size):
            bumped = [p.copy() for p in point]
            bumped[i].ravel()[j] = flat[j] + eps
            up_g, _, up_loss = run(bumped)
            up = up_g.value(up_loss).reshape(())[()]
            bumped[i].ravel()[j] = flat[j] - eps
            down_g, _, down_loss = run(bumped)
            down = down_g.value(down_loss).reshape(())[()]
            numeric = (up - down) / (2.0 * eps)
            a = analytic.ravel()[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
