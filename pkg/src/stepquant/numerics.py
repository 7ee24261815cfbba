"""Dense float64 tensors and a small reverse-mode autodiff engine.

Values are plain ``numpy.ndarray`` objects in float64 (row-major).  A
:class:`Node` wraps a value together with the rule that maps the gradient of
its output onto its parents.  Only two kinds of implicit broadcasting are
supported by the elementwise ops: identical shapes, or one side being a
scalar (a Python number or a size-1 array).  Anything else goes through the
explicit :func:`broadcast_to`.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class Node:
    """A value in the computation graph.

    Leaves are created with :meth:`param` (trainable) or :meth:`const`.
    ``grad`` is filled in by :func:`backward` for leaves that require grad.
    """

    __slots__ = ("value", "parents", "rule", "requires_grad", "grad", "name")

    def __init__(self, value, parents=(), rule=None, requires_grad=False, name=None):
        self.value = value
        self.parents = tuple(parents)
        self.rule = rule
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @classmethod
    def param(cls, value, name=None) -> Node:
        return cls(as_tensor(value).copy(), requires_grad=True, name=name)

    @classmethod
    def const(cls, value) -> Node:
        return cls(as_tensor(value))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node.const(x)


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def _make(value: np.ndarray, parents: Sequence[Node], rule: BackwardRule, op: str) -> Node:
    _check_finite(value, op)
    if any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True, name=op)
    return Node(value, name=op)


def custom_grad_node(value, parents: Sequence[Node], rule: BackwardRule, name="custom") -> Node:
    """Graph node whose parent gradients come from ``rule(grad_out)``.

    The rule must return one entry per parent (``None`` meaning zero).  Shape
    consistency is checked when :func:`backward` runs.
    """
    return _make(as_tensor(value), [_lift(p) for p in parents], rule, name)


# -- elementwise -------------------------------------------------------------


def _is_scalar(n: Node) -> bool:
    return n.value.size == 1


def _pair(a, b, op: str) -> tuple[Node, Node]:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")
    return a, b


def _unbroadcast(g: np.ndarray, like: Node) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.full(like.shape, g.sum())


def _binary_value(a: Node, b: Node, fn) -> np.ndarray:
    av, bv = a.value, b.value
    # a size-1 operand is treated as a scalar so the result keeps the full shape
    if av.shape != bv.shape:
        if av.size == 1:
            av = av.reshape(())
        if bv.size == 1:
            bv = bv.reshape(())
    return fn(av, bv)


def add(a, b) -> Node:
    a, b = _pair(a, b, "add")
    out = _binary_value(a, b, np.add)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Node:
    a, b = _pair(a, b, "sub")
    out = _binary_value(a, b, np.subtract)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Node:
    a, b = _pair(a, b, "mul")
    out = _binary_value(a, b, np.multiply)

    def rule(g):
        ga = _binary_value(Node(g), b, np.multiply)
        gb = _binary_value(Node(g), a, np.multiply)
        return _unbroadcast(ga, a), _unbroadcast(gb, b)

    return _make(out, (a, b), rule, "mul")


def div(a, b) -> Node:
    a, b = _pair(a, b, "div")
    if np.any(b.value == 0):
        raise DomainError("div: division by zero")
    out = _binary_value(a, b, np.divide)

    def rule(g):
        ga = _binary_value(Node(g), b, np.divide)
        gb = -_binary_value(Node(g * out), b, np.divide)
        return _unbroadcast(ga, a), _unbroadcast(gb, b)

    return _make(out, (a, b), rule, "div")


def neg(a) -> Node:
    a = _lift(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a) -> Node:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = _lift(a)
    if np.any(a.value <= 0):
        raise DomainError("log: argument must be positive")
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a) -> Node:
    a = _lift(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Node:
    """x * sigmoid(x)."""
    a = _lift(a)
    sig = sigmoid_value(a.value)
    out = a.value * sig
    return _make(out, (a,), lambda g: (g * sig * (1.0 + a.value * (1.0 - sig)),), "silu")


# -- linear algebra and reductions -------------------------------------------


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.value @ b.value
    return _make(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def _check_axis(a: Node, axis, op: str):
    if axis is None:
        return None
    nd = a.value.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")
    return axis % nd


def _reshape_for(g: np.ndarray, a: Node, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.reshape(g, (1,) * a.value.ndim)
    return g if keepdims else np.expand_dims(g, axis)


def _reduced(out: np.ndarray, axis) -> np.ndarray:
    return out.reshape(1) if axis is None else out


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = _lift(a)
    axis = _check_axis(a, axis, "sum")
    out = _reduced(np.sum(a.value, axis=axis, keepdims=keepdims), axis)

    def rule(g):
        return (np.broadcast_to(_reshape_for(g, a, axis, keepdims), a.shape).copy(),)

    return _make(out, (a,), rule, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    a = _lift(a)
    axis = _check_axis(a, axis, "mean")
    count = a.value.size if axis is None else a.shape[axis]
    out = _reduced(np.mean(a.value, axis=axis, keepdims=keepdims), axis)

    def rule(g):
        return (np.broadcast_to(_reshape_for(g, a, axis, keepdims) / count, a.shape).copy(),)

    return _make(out, (a,), rule, "mean")


def reduce_max(a, axis=None, keepdims=False) -> Node:
    """Max reduction; the gradient goes to the first maximal element."""
    a = _lift(a)
    axis = _check_axis(a, axis, "max")
    out = _reduced(np.max(a.value, axis=axis, keepdims=keepdims), axis)

    def rule(g):
        grad = np.zeros_like(a.value)
        if axis is None:
            grad.flat[np.argmax(a.value)] = g.reshape(-1)[0]
            return (grad,)
        idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
        np.put_along_axis(grad, idx, _reshape_for(g, a, axis, keepdims), axis=axis)
        return (grad,)

    return _make(out, (a,), rule, "max")


# -- structural --------------------------------------------------------------


def broadcast_to(a, shape) -> Node:
    """Explicit expansion of size-1 dimensions."""
    a = _lift(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    lead = len(shape) - a.value.ndim
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1
    )

    def rule(g):
        return (np.sum(g, axis=axes, keepdims=True).reshape(a.shape),)

    return _make(out, (a,), rule, "broadcast_to")


def reshape(a, shape) -> Node:
    a = _lift(a)
    out = a.value.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [_lift(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[n.shape for n in nodes]}") from exc
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _make(out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take(a, indices, axis: int = 0) -> Node:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.value, idx, axis=axis)

    def rule(g):
        grad = np.zeros_like(a.value)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return _make(out, (a,), rule, "take")


def log_softmax(a, axis: int = -1) -> Node:
    a = _lift(a)
    shift = np.max(a.value, axis=axis, keepdims=True)
    z = a - broadcast_to(Node.const(shift), a.shape)
    lse = log(reduce_sum(exp(z), axis=axis, keepdims=True))
    return z - broadcast_to(lse, a.shape)


def softmax(a, axis: int = -1) -> Node:
    return exp(log_softmax(a, axis=axis))


# -- backward ----------------------------------------------------------------


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Backpropagate from a scalar root; returns ``{leaf: grad}``.

    Gradients from multiple uses of a node are summed.  Each leaf's ``grad``
    attribute is overwritten with its total.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        parent_grads = node.rule(g)
        if len(parent_grads) != len(node.parents):
            raise ShapeError(f"{node.name}: backward rule returned {len(parent_grads)} grads "
                             f"for {len(node.parents)} parents")
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.shape:
                raise ShapeError(f"{node.name}: gradient shape {pg.shape} does not match "
                                 f"parent shape {p.shape}")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaves


# -- optimisation ------------------------------------------------------------


class Adam:
    """Adaptive-moment gradient descent over a list of leaf nodes.

    ``lr_scale`` gives an optional per-parameter multiplier on the step size.
    """

    def __init__(self, params: Sequence[Node], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, lr_scale: Sequence[float] | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.lr_scale = list(lr_scale) if lr_scale is not None else [1.0] * len(self.params)
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, grads: dict[Node, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.value)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            step = lr * self.lr_scale[i] * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.value = p.value - step

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Seedable, splittable generator (PCG64); split with ``rng.spawn(k)``."""
    return np.random.Generator(np.random.PCG64(seed))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b))) / scale


__all__ = [
    "Adam", "DomainError", "Node", "NonFiniteError", "ShapeError", "add", "as_tensor",
    "backward", "broadcast_to", "concat", "custom_grad_node", "div", "exp", "log",
    "log_softmax", "make_rng", "matmul", "mul", "neg", "reduce_max", "reduce_mean",
    "reduce_sum", "relative_error", "reshape", "sigmoid_value", "silu", "softmax", "sqrt",
    "sub", "take",
]
