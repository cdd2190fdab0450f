"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and records the operation that produced
it. Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into every reachable
tensor that has ``requires_grad`` set.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype.kind not in "f":
        arr = arr.astype(np.float32 if dtype is None else dtype)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum over the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        self.data = _as_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values produced by {op or 'constructor'}")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def dims(self) -> tuple:
        return self.data.shape

    shape = dims

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph -------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got dims {self.dims}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        # iterative post-order DFS; parents visited in recorded order for determinism
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen and _tracks(parent):
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *dims):
        return reshape(self, dims[0] if len(dims) == 1 and isinstance(dims[0], tuple) else dims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if any(_tracks(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


# -- elementwise ---------------------------------------------------------------
def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.dims), _unbroadcast(g, b.dims)

    return _result(out, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.dims), _unbroadcast(g * a.data, b.dims)

    return _result(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(out, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(out, (a,), backward, "gelu")


# -- reductions and shape ------------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.dims).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.dims[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(count))


def reshape(a: Tensor, dims) -> Tensor:
    out = a.data.reshape(dims)
    return _result(out, (a,), lambda g: (g.reshape(a.dims),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.dims[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a 1-D tensor into ``n`` identical rows."""
    out = np.broadcast_to(a.data, (n,) + a.dims).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=0),), "broadcast_rows")


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions batch like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.dims} and {b.dims}")
    if a.dims[-1] != b.dims[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.dims} x {b.dims}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.dims), _unbroadcast(gb, b.dims)

    return _result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


# -- normalisation and losses --------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.dims[axis] < 1:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.dims[-1]
    if gain.dims != (d,) or bias.dims != (d,):
        raise ValueError(f"layer_norm: gain/bias dims {gain.dims}/{bias.dims} do not match {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(list(labels), dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.dims[0],):
        raise ValueError(f"cross_entropy: logits {logits.dims} vs {labels.shape[0]} labels")
    k = logits.dims[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(labels.size)
    n = max(labels.size, 1)
    picked = logp.data[rows, labels]
    out = np.asarray(-picked.sum() / n, dtype=logits.dtype)

    def backward(g):
        full = np.zeros_like(logp.data)
        full[rows, labels] = -g / n
        return (full,)

    return _result(out, (logp,), backward, "cross_entropy")
