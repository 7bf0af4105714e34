"""Reverse-mode automatic differentiation over float64 arrays of rank <= 2.

Every differentiable quantity in the package (supernet weights, generator
parameters, sampling logits) is a :class:`Value`.  Operations build a DAG
of ``Value`` nodes; :func:`backward` walks it once in reverse topological
order and accumulates gradients into ``.grad``.

Example
-------
>>> x = Parameter([3.0], name="x")
>>> backward((x * x).sum())
>>> x.grad
array([6.])
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; outputs never require grad."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"arrays of rank <= 2 only, got shape {arr.shape}")
    return arr


class Value:
    """A node in the computation graph.

    ``grad`` is ``None`` until a backward pass reaches the node; after that it
    always has the shape of ``data``.
    """

    __array_priority__ = 100  # make ndarray <op> Value dispatch to Value

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op=""):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 and data.ndim <= 2 else _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Value, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Value({self.data!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Value":
        return Value(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)


class Parameter(Value):
    """A trainable leaf with a stable name used for snapshots and checkpoints."""

    def __init__(self, data, name: str):
        super().__init__(_as_array(data), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(data: np.ndarray, parents: tuple[Value, ...], fn, op: str) -> Value:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Value(data, True, parents, fn, op)
    return Value(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Value, b: Value, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _check_finite(out: np.ndarray, inputs: Iterable[np.ndarray], op: str) -> None:
    if not np.all(np.isfinite(out)) and all(np.all(np.isfinite(x)) for x in inputs):
        raise NumericDomainError(f"{op} produced a non-finite value from finite input")


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "mul")

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), fn, "mul")


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(all="ignore"):
        out = a.data / b.data
    _check_finite(out, (a.data, b.data), "div")

    def fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / b.data**2, b.shape)

    return _node(out, (a, b), fn, "div")


def matmul(a, b) -> Value:
    """Matrix product with numpy semantics for 1-D operands."""
    a, b = as_value(a), as_value(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul does not accept scalars")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        a2 = a.data if a.ndim == 2 else a.data[None, :]
        b2 = b.data if b.ndim == 2 else b.data[:, None]
        g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _node(np.asarray(out, dtype=np.float64), (a, b), fn, "matmul")


# ----------------------------------------------------------------- unary ops


def relu(x) -> Value:
    x = as_value(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Value:
    x = as_value(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Value:
    x = as_value(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x) -> Value:
    x = as_value(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    _check_finite(out, (x.data,), "exp")
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Value:
    x = as_value(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    _check_finite(out, (x.data,), "log")
    return _node(out, (x,), lambda g: (g / x.data,), "log")


def square(x) -> Value:
    x = as_value(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def vsum(x, axis=None) -> Value:
    x = as_value(x)
    out = np.asarray(x.data.sum(axis=axis), dtype=np.float64)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), fn, "sum")


def mean(x, axis=None) -> Value:
    x = as_value(x)
    count = x.data.size if axis is None else x.shape[axis]
    return vsum(x, axis) * (1.0 / count)


def reshape(x, shape) -> Value:
    x = as_value(x)
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (np.reshape(g, x.shape),), "reshape")


def getitem(x, index) -> Value:
    x = as_value(x)
    out = np.array(x.data[index], dtype=np.float64)

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (x,), fn, "getitem")


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(out, tuple(values), fn, "concat")


def softmax(x, axis: int = -1) -> Value:
    x = as_value(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), fn, "softmax")


def straight_through(soft: Value, hard: np.ndarray) -> Value:
    """Forward value ``hard``, gradient routed unchanged into ``soft``."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _node(hard.copy(), (soft,), lambda g: (g,), "straight_through")


def softmax_cross_entropy(logits, labels) -> Value:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is either a vector with an integer label or an (m, n) batch
    with an integer array of m labels.
    """
    logits = as_value(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels))
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError("labels must be integer class indices")
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"expected {z.shape[0]} labels, got {labels.shape}")
    n_classes = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    shifted = z - z.max(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    # log(1 + sum of the non-max terms) keeps tiny losses accurate
    rest = np.exp(shifted)
    rest[rows, np.argmax(shifted, axis=1)] = 0.0
    logsumexp = np.log1p(rest.sum(axis=1))
    losses = logsumexp - shifted[rows, labels]
    out = np.asarray(losses.mean(), dtype=np.float64)

    def fn(g):
        probs = np.exp(shifted - logsumexp[:, None])
        probs[rows, labels] -= 1.0
        grad = probs * (g / z.shape[0])
        return (grad[0] if single else grad,)

    return _node(out, (logits,), fn, "softmax_cross_entropy")


# ------------------------------------------------------------------ backward


def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node.

    Gradients add onto whatever is already stored; callers zero them.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------- optimizers


class SGD:
    """Plain gradient descent; parameters without a gradient are skipped."""

    def __init__(self, params: Iterable[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class Adam:
    """Adam with bias correction.

    The moment buffers are exposed through :meth:`state_dict` so training can
    be resumed bit-exactly.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        state = {"t": np.array(float(self.t))}
        for p, m, v in zip(self.params, self.m, self.v):
            state[f"m.{p.name}"] = m.copy()
            state[f"v.{p.name}"] = v.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state[f"m.{p.name}"], dtype=np.float64)
            self.v[i] = np.array(state[f"v.{p.name}"], dtype=np.float64)


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    SGD(params, lr).step()


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        p.grad = None
