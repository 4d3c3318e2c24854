"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Only the operations the context-aware head and its losses need are provided.
Values are numpy arrays of rank 0-3 (rank 0 for reduced scalars, rank 3 for
a batch of per-image matrices). Row-wise operations act on the last axis.

Usage::

    x = Tensor(np.ones((3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(relu(x))
    (gx,) = tape.gradient(loss, [x])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "softmax_rows",
    "log_softmax_rows",
    "l2_normalize_rows",
    "inv_row_norms",
    "concat_cols",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "detach",
    "DetachLog",
]

MAX_RANK = 3
NORM_EPS = 1e-12

_ids = itertools.count()
_active_tapes: list["Tape"] = []
_detach_log: Optional["DetachLog"] = None


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable float64 array node.

    Parameters
    ----------
    data : array_like
        Values; copied and stored read-only.
    requires_grad : bool
        Whether gradients should be tracked through this tensor.
    """

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds supported rank {MAX_RANK}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # skips the defensive copy for freshly computed arrays
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds supported rank {MAX_RANK}")
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-use: enter it, run one forward pass, then call
    :meth:`gradient` once or several times. Operations executed while no
    tape is active are evaluated but not recorded.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def gradient(self, target: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``target`` with respect to each of ``wrt``.

        Tensors not connected to ``target`` receive exact zeros.
        """
        if target.data.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {target.id: np.ones_like(target.data)}
        for rec in reversed(self.records):
            g = grads.get(rec.output_id)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        return [np.array(grads.get(t.id, np.zeros_like(t.data)), dtype=np.float64) for t in wrt]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, needs)
    if needs and _active_tapes:
        _active_tapes[-1].records.append(_Record(inputs, out.id, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a leading batch axis broadcasts."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes differ for {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ _swap(bv), av.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(av) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit(av @ bv, (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
    # a read-only view is safe because tensor data is never written
    return _emit(_swap(a.data), (a,), lambda g: (_swap(g),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit(av * bv, (a, b), backward)


def div(a, b) -> Tensor:
    """Elementwise quotient; the caller guarantees a nonzero divisor."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    av, bv = a.data, b.data
    out = av / bv

    def backward(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _row_max(x: np.ndarray) -> np.ndarray:
    # numpy's max over a short trailing axis is slow; fold columns instead
    if x.shape[-1] > 32:
        return x.max(axis=-1, keepdims=True)
    m = x[..., 0].copy()
    for j in range(1, x.shape[-1]):
        np.maximum(m, x[..., j], out=m)
    return m[..., None]


def _row_sum(x: np.ndarray) -> np.ndarray:
    return np.einsum("...i->...", x)[..., None]


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    s = a.data - _row_max(a.data)
    np.exp(s, out=s)
    s /= _row_sum(s)

    def backward(g):
        return (s * (g - _row_sum(g * s)),)

    return _emit(s, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    """Row-wise log-softmax via log-sum-exp."""
    a = as_tensor(a)
    z = a.data - _row_max(a.data)
    out = z - np.log(_row_sum(np.exp(z)))

    def backward(g):
        return (g - np.exp(out) * _row_sum(g),)

    return _emit(out, (a,), backward)


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", x, x))[..., None]


def l2_normalize_rows(a, eps: float = NORM_EPS) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm <= eps become zero."""
    a = as_tensor(a)
    norm = _row_norms(a.data)
    live = norm > eps
    inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0)
    y = a.data * inv

    def backward(g):
        proj = np.einsum("...i,...i->...", g, y)[..., None]
        return ((g - y * proj) * inv,)

    return _emit(y, (a,), backward)


def inv_row_norms(a, eps: float = NORM_EPS) -> Tensor:
    """Column of reciprocal row norms ``[..., m, 1]``; 0 for rows with norm <= eps."""
    a = as_tensor(a)
    norm = _row_norms(a.data)
    live = norm > eps
    inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0)
    av = a.data

    def backward(g):
        return (-(g * inv ** 3) * av,)

    return _emit(inv, (a,), backward)


def concat_cols(a, b) -> Tensor:
    """Concatenate along the last axis; a rank-2 operand broadcasts over a batch axis."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    except ValueError:
        lead = None
    if lead is None or a.shape[-2:-1] != b.shape[-2:-1] or min(a.ndim, b.ndim) < 2:
        raise DimensionError(f"concat_cols: row shapes differ for {a.shape} and {b.shape}")
    p = a.shape[-1]
    av = np.broadcast_to(a.data, lead + a.shape[-1:])
    bv = np.broadcast_to(b.data, lead + b.shape[-1:])

    def backward(g):
        return _unbroadcast(g[..., :p], a.shape), _unbroadcast(g[..., p:], b.shape)

    return _emit(np.concatenate([av, bv], axis=-1), (a, b), backward)


def _check_axis(a: Tensor, axis) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")


def reduce_sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def reduce_mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return _emit(value.copy(), (a,), lambda g: (g.reshape(old),))


def detach(a) -> Tensor:
    """Same values, cut from the tape: gradients through it are exactly zero."""
    a = as_tensor(a)
    value = a.data.copy()
    if _detach_log is not None:
        value = _detach_log.visit(value)
    return Tensor._wrap(value, False)


class DetachLog:
    """Records the values leaving every :func:`detach`, then replays them.

    Finite-difference checks use this to hold stop-gradient values fixed at the
    base point, so the numeric derivative is the same one the tape computes.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self._mode = "record"
        self._cursor = 0

    def visit(self, value: np.ndarray) -> np.ndarray:
        if self._mode == "record":
            self.values.append(value)
            return value
        if self._cursor >= len(self.values) or self.values[self._cursor].shape != value.shape:
            raise RuntimeError("replayed forward pass does not match the recorded detach sequence")
        out = self.values[self._cursor]
        self._cursor += 1
        return out.copy()

    def recording(self) -> "DetachLog":
        self._mode = "record"
        self.values = []
        return self

    def replaying(self) -> "DetachLog":
        self._mode = "replay"
        self._cursor = 0
        return self

    def __enter__(self) -> "DetachLog":
        global _detach_log
        if _detach_log is not None:
            raise RuntimeError("detach logs do not nest")
        _detach_log = self
        return self

    def __exit__(self, *exc) -> None:
        global _detach_log
        _detach_log = None
