"""Dense float64 tensor with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`GradTape` whenever
at least one input requires a gradient.  Outside a tape every operation is a
plain numpy computation, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NonFiniteError",
    "tensor",
    "zeros",
    "ones",
    "as_tensor",
    "make_op",
    "check_finite",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_state = threading.local()
_CHECK_FINITE = True


def check_finite(enabled: bool) -> None:
    """Toggle the post-operation finiteness check (on by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array.

    The backing array is read-only; every operation returns a fresh tensor.
    Leaf tensors created with ``requires_grad=True`` are the parameters an
    optimizer may rebind through :meth:`assign`.
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal constructor: takes ownership of ``arr`` without copying
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def assign(self, value: np.ndarray) -> None:
        """Rebind a leaf parameter to a new value of identical shape."""
        value = np.array(value, dtype=np.float64, copy=True)
        if value.shape != self.shape:
            raise ValueError(f"assign: shape {value.shape} does not match {self.shape}")
        value.flags.writeable = False
        self._data = value

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


class GradTape:
    """Records differentiable operations for one backward pass.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended to :attr:`nodes` in execution
    order.  A tape is single-owner and must not be shared across threads.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append((out, inputs, vjp))

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``sources``.

        Sources that the loss does not depend on receive exact zeros.
        """
        if loss.size != 1:
            raise ValueError(f"gradient: loss must be a scalar, got shape {loss.shape}")
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for out, inputs, vjp in reversed(self.nodes):
            key = id(out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            in_grads = vjp(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = []
        for src in sources:
            g = grads.get(id(src))
            result.append(np.zeros(src.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(src.shape))
        return result


def make_op(out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Wrap a forward result and record its vector-Jacobian product."""
    if _CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced (output shape {np.shape(out)})")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    t = Tensor._wrap(np.asarray(out, dtype=np.float64), requires_grad=needs)
    if needs:
        tape.record(t, inputs, vjp)
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("div: denominator contains zeros")

    def vjp(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad / bd, (a, b), vjp)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    y = np.sqrt(x.data)
    return make_op(y, (x,), lambda g: (g / (2.0 * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,))


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


# reductions and shape plumbing -------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: cannot reshape {old} into {tuple(shape)}") from exc
    return make_op(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat: no tensors given")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ValueError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ValueError(f"split: sizes {list(sizes)} do not add up to {x.shape[ax]} (shape {x.shape})")
    pieces = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        pieces.append(slice_(x, tuple(idx)))
        start += n
    return pieces


def slice_(x: Tensor, index: tuple) -> Tensor:
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return make_op(x.data[index].copy(), (x,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul: operands need >=2 dims, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dims differ for {ad.shape} @ {bd.shape}")
    from . import counters

    counters.add_macs(int(np.prod(np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2]), dtype=np.int64))
                      * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad @ bd, (a, b), vjp)
