"""Reverse-mode automatic differentiation over numpy arrays.

The computation graph doubles as the gradient tape: every operation returns
a Node remembering its parent Nodes and a closure that distributes the
output gradient back to them. backward() walks the recorded operations in
reverse topological order and accumulates d(loss)/d(leaf) into Node.grad.

All values are float64. Gradient checking against central finite
differences is unreliable at lower precision, and determinism contracts in
the rest of the package assume one dtype everywhere.

Inside a `no_grad()` block operations return plain constant Nodes and skip
all recording, which roughly halves inference cost and is what the
finite-difference oracle uses for its probe evaluations.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

Array = np.ndarray

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One value in the recorded computation.

    Leaves hold parameters (requires_grad=True) or constants. Interior
    nodes carry the backward closure produced by the op that made them.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.value.shape

    def __float__(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"cannot convert shape {self.value.shape} node to float")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # light operator sugar; the named functions below are the real API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _result(value: Array, parents: tuple, bwd) -> Node:
    """Build an op result, recording parents only when a grad path exists."""
    out = Node.__new__(Node)
    out.value = value
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if shape == (1,):
        return g.sum().reshape(1)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_elementwise(a: Node, b: Node, opname: str) -> None:
    sa, sb = a.value.shape, b.value.shape
    if sa != sb and sa != () and sb != () and sa != (1,) and sb != (1,):
        raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_elementwise(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return _result(a.value + b.value, (a, b), bwd)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_elementwise(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.value.shape))

    return _result(a.value - b.value, (a, b), bwd)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_elementwise(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return _result(a.value * b.value, (a, b), bwd)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_elementwise(a, b, "div")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _result(a.value / b.value, (a, b), bwd)


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _result(a.value * c, (a,), bwd)


def reciprocal(a) -> Node:
    a = as_node(a)
    val = 1.0 / a.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g * val * val)

    return _result(val, (a,), bwd)


def matvec(W, x) -> Node:
    """Matrix-vector product: W of shape (m, n) applied to x of shape (n,)."""
    W, x = as_node(W), as_node(x)
    if W.value.ndim != 2 or x.value.ndim != 1 or W.value.shape[1] != x.value.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {W.value.shape} and {x.value.shape}")

    def bwd(g):
        if W.requires_grad:
            W._accumulate(np.outer(g, x.value))
        if x.requires_grad:
            x._accumulate(W.value.T @ g)

    return _result(W.value @ x.value, (W, x), bwd)


def concat(parts) -> Node:
    """Concatenate 1-D nodes into one vector."""
    parts = [as_node(p) for p in parts]
    for p in parts:
        if p.value.ndim != 1:
            raise ShapeError(f"concat: expected 1-D parts, got shape {p.value.shape}")
    sizes = [p.value.shape[0] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[off:off + n])
            off += n

    return _result(np.concatenate([p.value for p in parts]), tuple(parts), bwd)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function without overflow: each half uses a bounded exp."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Node:
    a = as_node(a)
    val = stable_sigmoid(a.value)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * val * (1.0 - val))

    return _result(val, (a,), bwd)


def tanh(a) -> Node:
    a = as_node(a)
    val = np.tanh(a.value)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - val * val))

    return _result(val, (a,), bwd)


def relu(a) -> Node:
    a = as_node(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.value > 0.0))

    return _result(np.maximum(a.value, 0.0), (a,), bwd)


def exp(a) -> Node:
    a = as_node(a)
    val = np.exp(a.value)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * val)

    return _result(val, (a,), bwd)


def log(a) -> Node:
    a = as_node(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.value)

    return _result(np.log(a.value), (a,), bwd)


def clamp_min(a, floor: float) -> Node:
    """max(a, floor) elementwise; gradient passes where a >= floor."""
    a = as_node(a)
    floor = float(floor)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.value >= floor))

    return _result(np.maximum(a.value, floor), (a,), bwd)


def square(a) -> Node:
    a = as_node(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * a.value)

    return _result(a.value * a.value, (a,), bwd)


def vsum(a) -> Node:
    a = as_node(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    return _result(np.asarray(a.value.sum()), (a,), bwd)


def vmean(a) -> Node:
    a = as_node(a)
    n = a.value.size
    if n == 0:
        raise ShapeError("vmean: empty input")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.value.shape).copy())

    return _result(np.asarray(a.value.mean()), (a,), bwd)


def _topo_order(root: Node) -> list:
    """Parents-before-children order of the grad-requiring subgraph."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the recorded graph.

    The loss must be scalar (size 1). Gradients add onto any existing
    .grad contents, so per-item losses can be accumulated across a batch;
    call zero_grad between optimizer steps. A parameter that does not
    participate in the graph simply keeps grad None, read back as zeros.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss._accumulate(np.ones_like(loss.value))
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
            if node is not loss:
                node.grad = None  # free interior grads once propagated


def grad_of(param: Node) -> Array:
    """Gradient of a leaf after backward(); zeros when disconnected."""
    if param.grad is None:
        return np.zeros_like(param.value)
    return param.grad
