"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: every operation on :class:`Tensor` records a
backward closure, and :func:`backward` walks the recorded graph in reverse
topological order accumulating gradients with a fixed (deterministic)
summation order.

All op helpers in this module (``sin``, ``exp``, ``matmul``, ...) accept
either a ``Tensor`` or a plain ``numpy`` array and return the matching kind,
so numerical code written against them runs tape-free at full numpy speed
when no gradients are involved.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "GradientError",
    "backward",
    "no_grad",
    "finite_checks",
    "set_finite_checks",
]


class GradientError(RuntimeError):
    """Raised when the engine produces or receives non-finite values."""


_GRAD_ENABLED = True
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Globally toggle per-operation finiteness checks (slow, diagnostic)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Context manager enabling finiteness checks on every op output."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


@contextlib.contextmanager
def no_grad():
    """Context manager suppressing tape recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    # make ndarray <op> Tensor defer to the Tensor's reflected methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the tape (stop-gradient)."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _check_finite(data, op):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise GradientError(f"non-finite values produced by op '{op}'")


def _make(data, parents, backward_fn, op):
    """Build an output node; records the tape only when a parent needs grad."""
    _check_finite(data, op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _lift_pair(a, b):
    """Lift both operands; python scalars adopt the Tensor operand's dtype so
    float32 graphs are not silently promoted to float64."""
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        if isinstance(b, (int, float)):
            return a, Tensor(np.asarray(b, dtype=a.data.dtype))
        return a, Tensor(np.asarray(b))
    if isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return Tensor(np.asarray(a)), b


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, g):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, seed=None, check_finite=False) -> None:
    """Accumulate gradients of ``loss`` into every reachable Tensor's ``.grad``.

    Traversal and accumulation order are deterministic.  ``check_finite``
    raises a :class:`GradientError` naming the op that produced a non-finite
    gradient.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if not loss.requires_grad:
        raise GradientError("loss does not require grad; nothing to differentiate")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    if seed is None:
        seed = np.ones_like(loss.data)
    loss.grad = np.asarray(seed, dtype=loss.data.dtype)
    if check_finite and not np.all(np.isfinite(loss.data)):
        raise GradientError(f"loss produced by op '{loss.op}' is non-finite")

    for node in reversed(topo):
        if node._backward is None:
            continue
        if check_finite and not np.all(np.isfinite(node.grad)):
            raise GradientError(f"non-finite gradient flowing into op '{node.op}'")
        node._backward(node.grad)

    if check_finite:
        for node in topo:
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise GradientError(f"non-finite gradient accumulated at op '{node.op}'")


# --- primitive ops ----------------------------------------------------


def add(a, b):
    if not _is_tensor(a, b):
        return np.add(a, b)
    a, b = _lift_pair(a, b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "add")


def sub(a, b):
    if not _is_tensor(a, b):
        return np.subtract(a, b)
    a, b = _lift_pair(a, b)
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "sub")


def mul(a, b):
    if not _is_tensor(a, b):
        return np.multiply(a, b)
    a, b = _lift_pair(a, b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "mul")


def div(a, b):
    if not _is_tensor(a, b):
        return np.divide(a, b)
    a, b = _lift_pair(a, b)
    out_data = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "div")


def power(a, exponent):
    if not _is_tensor(a):
        return np.power(a, exponent)
    a = _lift(a)
    exponent = float(exponent)
    out_data = a.data**exponent

    def backward_fn(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward_fn, "power")


def matmul(a, b):
    if not _is_tensor(a, b):
        return np.matmul(a, b)
    a, b = _lift(a), _lift(b)
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), backward_fn, "matmul")


def exp(x):
    if not _is_tensor(x):
        return np.exp(x)
    x = _lift(x)
    out_data = np.exp(x.data)

    def backward_fn(g):
        _accumulate(x, g * out_data)

    return _make(out_data, (x,), backward_fn, "exp")


def log(x):
    if not _is_tensor(x):
        return np.log(x)
    x = _lift(x)
    out_data = np.log(x.data)

    def backward_fn(g):
        _accumulate(x, g / x.data)

    return _make(out_data, (x,), backward_fn, "log")


def sqrt(x):
    if not _is_tensor(x):
        return np.sqrt(x)
    x = _lift(x)
    out_data = np.sqrt(x.data)

    def backward_fn(g):
        _accumulate(x, g * (0.5 / out_data))

    return _make(out_data, (x,), backward_fn, "sqrt")


def sin(x):
    if not _is_tensor(x):
        return np.sin(x)
    x = _lift(x)
    out_data = np.sin(x.data)

    def backward_fn(g):
        _accumulate(x, g * np.cos(x.data))

    return _make(out_data, (x,), backward_fn, "sin")


def cos(x):
    if not _is_tensor(x):
        return np.cos(x)
    x = _lift(x)
    out_data = np.cos(x.data)

    def backward_fn(g):
        _accumulate(x, -g * np.sin(x.data))

    return _make(out_data, (x,), backward_fn, "cos")


def relu(x):
    if not _is_tensor(x):
        return np.maximum(x, 0.0)
    x = _lift(x)
    out_data = np.maximum(x.data, 0.0)

    def backward_fn(g):
        _accumulate(x, g * (x.data > 0.0))

    return _make(out_data, (x,), backward_fn, "relu")


def softplus(x):
    """log(1 + e^x), computed stably."""
    if not _is_tensor(x):
        return np.logaddexp(0.0, x)
    x = _lift(x)
    out_data = np.logaddexp(0.0, x.data)

    def backward_fn(g):
        _accumulate(x, g * expit(x.data))

    return _make(out_data, (x,), backward_fn, "softplus")


def sigmoid(x):
    if not _is_tensor(x):
        return expit(x)
    x = _lift(x)
    out_data = expit(x.data)

    def backward_fn(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward_fn, "sigmoid")


def tensor_sum(x, axis=None, keepdims=False):
    if not _is_tensor(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    x = _lift(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(out_data, (x,), backward_fn, "sum")


def tensor_mean(x, axis=None, keepdims=False):
    if not _is_tensor(x):
        return np.mean(x, axis=axis, keepdims=keepdims)
    x = _lift(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out_data.size, 1)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / count, x.data.shape))

    return _make(out_data, (x,), backward_fn, "mean")


def cumsum(x, axis):
    if not _is_tensor(x):
        return np.cumsum(x, axis=axis)
    x = _lift(x)
    out_data = np.cumsum(x.data, axis=axis)

    def backward_fn(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        _accumulate(x, rev)

    return _make(out_data, (x,), backward_fn, "cumsum")


def concatenate(parts, axis=-1):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [_lift(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])

    return _make(out_data, tuple(parts), backward_fn, "concatenate")


def reshape(x, shape):
    if not _is_tensor(x):
        return np.reshape(x, shape)
    x = _lift(x)
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward_fn, "reshape")


def broadcast_to(x, shape):
    if not _is_tensor(x):
        return np.broadcast_to(x, shape)
    x = _lift(x)
    out_data = np.broadcast_to(x.data, shape)

    def backward_fn(g):
        _accumulate(x, _unbroadcast(g, x.data.shape))

    return _make(out_data, (x,), backward_fn, "broadcast_to")


def take(x, key):
    """Indexing/slicing; integer-array keys gather rows with scatter-add backward."""
    if not _is_tensor(x):
        return np.asarray(x)[key]
    x = _lift(x)
    out_data = x.data[key]

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _accumulate(x, full)

    return _make(out_data, (x,), backward_fn, "take")


def maximum(a, b):
    if not _is_tensor(a, b):
        return np.maximum(a, b)
    a, b = _lift_pair(a, b)
    out_data = np.maximum(a.data, b.data)

    def backward_fn(g):
        mask = a.data >= b.data
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * mask, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * (~mask), b.data.shape))

    return _make(out_data, (a, b), backward_fn, "maximum")


def transpose(x, axes=None):
    if not _is_tensor(x):
        return np.transpose(x, axes)
    x = _lift(x)
    out_data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward_fn(g):
        _accumulate(x, np.transpose(g, inv))

    return _make(out_data, (x,), backward_fn, "transpose")


def stack(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.stack(parts, axis=axis)
    parts = [_lift(p) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=axis)

    def backward_fn(g):
        slabs = np.moveaxis(g, axis, 0)
        for p, slab in zip(parts, slabs):
            if p.requires_grad:
                _accumulate(p, slab)

    return _make(out_data, tuple(parts), backward_fn, "stack")


def detach(x):
    """Stop-gradient; identity on plain arrays."""
    if isinstance(x, Tensor):
        return x.detach()
    return x


def data_of(x):
    """Raw numpy array behind ``x`` whether or not it is a Tensor."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)
