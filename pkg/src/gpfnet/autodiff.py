"""Minimal dense tensors with reverse-mode automatic differentiation.

Every op records its inputs and a backward closure on the output tensor;
``Tensor.backward`` walks the recorded graph in reverse topological order and
frees it afterwards. Arrays are float64 numpy arrays. Shapes must agree
exactly: the only implicit broadcast is scalar-with-tensor, and trailing-axis
bias addition goes through the explicit :func:`add_bias` op.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "matmul_t",
    "add_bias",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "var",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "layer_norm",
    "l2_normalize",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor in the graph feeding this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # operator sugar -------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    if _is_scalar(a):
        b = as_tensor(b)
        return _make(a - b.data, (b,), lambda g: (-g,), "rsub_scalar")
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a, c = as_tensor(a), float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,), "sqrt")


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over identical leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` for 2-D operands; gradients come back in each operand's own layout."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_t: cannot multiply {a.shape} by transpose of {b.shape}")
    return _make(a.data @ b.data.T, (a, b), lambda g: (g @ b.data, g.T @ a.data), "matmul_t")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add ``bias`` along the trailing axes of ``x`` (``bias.shape == x.shape[-bias.ndim:]``)."""
    x, bias = as_tensor(x), as_tensor(bias)
    k = bias.ndim
    if k == 0 or k > x.ndim or x.shape[-k:] != bias.shape:
        raise ShapeError(f"add_bias: bias shape {bias.shape} does not trail {x.shape}")
    lead = tuple(range(x.ndim - k))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)), "add_bias")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    data = x.data.reshape(tuple(shape))
    return _make(data, (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    data = x.data[index]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(data, dtype=np.float64), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    splits = np.cumsum(sizes)[:-1]
    return _make(data, tuple(tensors), lambda g: np.split(g, splits, axis=axis), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {[t.shape for t in tensors]}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _make(data, tuple(tensors), backward, "stack")


# reductions ----------------------------------------------------------------

def _restore(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)
    return _make(np.asarray(data), (x,), lambda g: (_restore(g, shape, axis, keepdims).copy(),), "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    data = x.data.mean(axis=axis, keepdims=keepdims)
    return _make(np.asarray(data), (x,), lambda g: (_restore(g, shape, axis, keepdims) / n,), "mean")


def var(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Population variance."""
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    data = (centered**2).mean(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_restore(g, shape, axis, keepdims) * centered * (2.0 / n),)

    return _make(np.asarray(data), (x,), backward, "var")


# normalisers ---------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero vector")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


# verification --------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor; other tensors it closes over are left
    alone. ``coords`` restricts the comparison to the given flat indices.
    Returns ``max |a - n| / max(1e-8, |a| + |n|)`` over the checked coordinates.
    """
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)  # view: edits land in x.data
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
