"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every op records its parents and a closure that pushes the output gradient
back to them. Nodes carry a creation index, and ``backward`` replays the
reachable nodes in reverse creation order, visiting each node once.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "ValidationError",
    "Tensor",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "relu",
    "square",
    "sqrt",
    "scale",
    "stack",
    "concat",
    "softmax_cross_entropy",
    "log_softmax",
    "Adam",
    "AdamState",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of the function (e.g. log of 0)."""


class ValidationError(ValueError):
    """An argument violates a documented precondition."""


_creation_counter = itertools.count()


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: "Tensor", b: "Tensor", op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    """Dense float64 array with an optional gradient.

    Attributes:
        data: The value, always a float64 ndarray.
        grad: Accumulated gradient of the same shape, or None.
        requires_grad: Whether gradients are tracked through this node.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._id = next(_creation_counter)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing ---------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` node."""
        if self.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes or not node.requires_grad:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)
        if not nodes:
            return

        # Interior gradients are transient; leaves keep and accumulate theirs.
        upstream: dict[int, np.ndarray] = {self._id: np.ones(self.shape)}
        for node_id in sorted(nodes, reverse=True):
            node = nodes[node_id]
            g = upstream.pop(node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if parent.requires_grad:
                    prev = upstream.get(parent._id)
                    upstream[parent._id] = pg if prev is None else prev + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return _power(self, float(p))

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return scale(_sum(self, axis, keepdims), 1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return _transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked, _parents=tuple(parents) if tracked else (), _op=op)
    if tracked:
        out._backward = backward
    return out


# -- binary elementwise ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * out / b.data, b.shape)),
        )

    return _make(out, (a, b), backward, "div")


# -- unary elementwise -----------------------------------------------------
def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: ((a, g * c),), "scale")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),), "log")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: ((a, g * mask),), "relu")


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data * a.data, (a,), lambda g: ((a, 2.0 * g * a.data),), "square")


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)

    def backward(g):
        if np.any(out == 0):
            raise DomainError("sqrt: gradient undefined at 0")
        return ((a, g * 0.5 / out),)

    return _make(out, (a,), backward, "sqrt")


def _power(a: Tensor, p: float) -> Tensor:
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("pow: negative base with fractional exponent")
    out = a.data**p
    return _make(out, (a,), lambda g: ((a, g * p * a.data ** (p - 1)),), "pow")


# -- shape ops -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape)),)

    return _make(out, (a,), backward, "sum")


def _reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: ((a, g.reshape(a.shape)),), "reshape")


def _transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: ((a, g.T),), "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return ((a, full),)

    return _make(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise DimensionError("stack of an empty sequence")
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple((t, parts[i]) for i, t in enumerate(ts))

    return _make(out, ts, backward, "stack")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(zip(ts, np.split(g, bounds, axis=axis)))

    return _make(out, ts, backward, "concat")


# -- losses ----------------------------------------------------------------
def _log_softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(logits) -> Tensor:
    logits = _lift(logits)
    out = _log_softmax_array(logits.data)

    def backward(g):
        soft = np.exp(out)
        return ((logits, g - soft * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), backward, "log_softmax")


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-sum_c target * log_softmax(logits)``.

    ``targets`` is a row-stochastic soft-label matrix of the same shape as
    ``logits``; it is treated as a constant.
    """
    logits = _lift(logits)
    t = targets.data if isinstance(targets, Tensor) else _as_array(targets)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} and targets {t.shape} must be equal B x C")
    if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValidationError("every target row must be non-negative and sum to 1")
    logp = _log_softmax_array(logits.data)
    batch = logits.shape[0]
    loss = -(t * logp).sum() / batch

    def backward(g):
        return ((logits, g * (np.exp(logp) - t) / batch),)

    return _make(loss, (logits,), backward, "softmax_cross_entropy")


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"label out of range [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# -- optimizer -------------------------------------------------------------
class AdamState:
    """Moment estimates and step counter for :class:`Adam`."""

    def __init__(self, shapes: Sequence[tuple[int, ...]], lr: float, beta1: float, beta2: float, eps: float):
        self.step = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and state must align")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam: shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a list of leaf tensors; missing gradients count as zero."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState([p.shape for p in self.params], lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)
