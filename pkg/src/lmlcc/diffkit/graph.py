"""Reverse-mode autodiff over numpy arrays.

Each operation builds a Node holding the forward value, references to its
parent nodes, and a closure that turns the node's upstream gradient into
vector-Jacobian contributions accumulated onto the parents. ``backward``
topologically sorts the graph and runs those closures in reverse.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward_rule: Callable[[np.ndarray], None] | None = None,
        name: str = "",
    ):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    # Arithmetic sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, as_node(other))

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, as_node(other))

    def __rmul__(self, other):
        return mul(as_node(other), self)

    def __truediv__(self, other):
        return div(self, as_node(other))

    def __rtruediv__(self, other):
        return div(as_node(other), self)

    def __neg__(self):
        return mul(self, as_node(-1.0))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return reduce_sum(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"


def leaf(value: np.ndarray, name: str = "") -> Node:
    """A graph input that accumulates gradient."""
    return Node(np.asarray(value), name=name)


def constant(value, name: str = "") -> Node:
    """A node treated as constant (no parents, no gradient consumers)."""
    return Node(np.asarray(value), name=name)


def as_node(value) -> Node:
    return value if isinstance(value, Node) else constant(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def accumulate(node: Node, grad: np.ndarray) -> None:
    grad = _unbroadcast(np.asarray(grad), node.value.shape)
    if node.grad is None:
        node.grad = grad.astype(node.value.dtype, copy=True)
    else:
        node.grad += grad


def topo_order(root: Node) -> list[Node]:
    """Parents-first topological order, iterative to spare the stack."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into every node reachable from ``root``.

    Root must be scalar (or is seeded with ones elementwise).
    """
    order = topo_order(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_rule is not None and node.grad is not None:
            node.backward_rule(node.grad)


def first_nonfinite(root: Node) -> Node | None:
    """First node (in forward order) holding a non-finite value, if any."""
    for node in topo_order(root):
        if not np.all(np.isfinite(node.value)):
            return node
    return None


# ---------------------------------------------------------------------------
# Elementwise and structural operations.
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    out = Node(a.value + b.value, (a, b))

    def rule(g):
        accumulate(a, g)
        accumulate(b, g)

    out.backward_rule = rule
    return out


def sub(a: Node, b: Node) -> Node:
    out = Node(a.value - b.value, (a, b))

    def rule(g):
        accumulate(a, g)
        accumulate(b, -g)

    out.backward_rule = rule
    return out


def mul(a: Node, b: Node) -> Node:
    out = Node(a.value * b.value, (a, b))

    def rule(g):
        accumulate(a, g * b.value)
        accumulate(b, g * a.value)

    out.backward_rule = rule
    return out


def div(a: Node, b: Node) -> Node:
    out = Node(a.value / b.value, (a, b))

    def rule(g):
        accumulate(a, g / b.value)
        accumulate(b, -g * a.value / (b.value * b.value))

    out.backward_rule = rule
    return out


def relu(x: Node) -> Node:
    mask = x.value > 0
    out = Node(np.where(mask, x.value, 0.0), (x,))

    def rule(g):
        accumulate(x, g * mask)

    out.backward_rule = rule
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Node) -> Node:
    s = _sigmoid(np.asarray(x.value, dtype=x.value.dtype))
    out = Node(s, (x,))

    def rule(g):
        accumulate(x, g * s * (1.0 - s))

    out.backward_rule = rule
    return out


def softplus(x: Node) -> Node:
    out = Node(np.logaddexp(0.0, x.value), (x,))

    def rule(g):
        accumulate(x, g * _sigmoid(x.value))

    out.backward_rule = rule
    return out


def exp(x: Node) -> Node:
    v = np.exp(x.value)
    out = Node(v, (x,))

    def rule(g):
        accumulate(x, g * v)

    out.backward_rule = rule
    return out


def log(x: Node) -> Node:
    out = Node(np.log(x.value), (x,))

    def rule(g):
        accumulate(x, g / x.value)

    out.backward_rule = rule
    return out


def reduce_sum(x: Node, axis=None) -> Node:
    out = Node(x.value.sum(axis=axis), (x,))

    def rule(g):
        if axis is None:
            accumulate(x, np.broadcast_to(g, x.value.shape))
        else:
            accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.value.shape))

    out.backward_rule = rule
    return out


def mean(x: Node, axis=None) -> Node:
    n = x.value.size if axis is None else x.value.shape[axis]
    return reduce_sum(x, axis=axis) * (1.0 / n)


def cumsum(x: Node) -> Node:
    """Cumulative sum of a 1-D vector."""
    out = Node(np.cumsum(x.value), (x,))

    def rule(g):
        accumulate(x, np.cumsum(g[::-1])[::-1])

    out.backward_rule = rule
    return out


def reshape(x: Node, shape) -> Node:
    out = Node(x.value.reshape(shape), (x,))

    def rule(g):
        accumulate(x, g.reshape(x.value.shape))

    out.backward_rule = rule
    return out


def getitem(x: Node, idx) -> Node:
    out = Node(x.value[idx], (x,))

    def rule(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        accumulate(x, full)

    out.backward_rule = rule
    return out


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    values = [n.value for n in nodes]
    out = Node(np.concatenate(values, axis=axis), tuple(nodes))
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for node, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            accumulate(node, g[tuple(sl)])

    out.backward_rule = rule
    return out


def matmul(a: Node, b: Node) -> Node:
    """2-D matrix product (N, K) @ (K, M)."""
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}"
        )
    out = Node(a.value @ b.value, (a, b))

    def rule(g):
        accumulate(a, g @ b.value.T)
        accumulate(b, a.value.T @ g)

    out.backward_rule = rule
    return out
