"""Dense float64 tensors with a linear reverse-mode tape.

Values are plain numpy arrays underneath; the tape records one entry per
primitive whose inputs require gradients, in creation order, so a reverse
walk over it is already a valid topological order.
"""
from __future__ import annotations

import builtins
import contextlib
import math
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class Tape:
    """Ordered record of primitive operations.

    Each entry is ``(out, parents, backward_fn)`` where ``backward_fn`` maps
    the output cotangent to one cotangent per parent.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        out._tape = self
        out._index = len(self.entries)
        self.entries.append((out, parents, fn))

    def __len__(self) -> int:
        return len(self.entries)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording even inside an active tape."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._index = -1
    tape = active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape.record(out, parents, fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise -----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.data + s, (a,), lambda g: (g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative entry")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflowed")
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive entry")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NumericError("reciprocal of zero")
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU, composed from primitives."""
    c = math.sqrt(2.0 / math.pi)
    inner = scale(add(a, scale(mul(mul(a, a), a), 0.044715)), c)
    return scale(mul(a, add_scalar(tanh(inner), 1.0)), 0.5)


# linear algebra -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def softmax_rows(a: Tensor, scale: float = 1.0) -> Tensor:
    """Row softmax of ``scale * a`` with row-max subtraction."""
    if scale <= 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows input is not finite")
    s = a.data * scale
    e = np.exp(s - s.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (scale * out * (g - inner),)

    return _make(out, (a,), back)


# reductions ------------------------------------------------------------------

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Sum over everything (scalar result) or one axis, keeping it as size 1."""
    if axis is None:
        shape = a.shape
        return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))
    out = a.data.sum(axis=axis, keepdims=True)
    shape = a.shape
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


# structure -------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: {a.shape} has {a.size} entries, target {shape} does not")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ContractError("concat of nothing")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[p.shape for p in parts]} along axis {axis}") from err
    return _make(data, parts, back)


def slice(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:  # noqa: A001
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [np.s_[:]] * a.ndim
    idx[axis] = np.s_[start:stop]
    idx = tuple(idx)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), (a,), back)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if builtins.sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    out, start = [], 0
    for s in sizes:
        out.append(slice(a, start, start + s, axis))
        start += s
    return out



def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


# autodiff ----------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced on an active tape")
    cot: dict[int, np.ndarray] = {loss._index: np.ones(loss.shape)}
    for i in range(loss._index, -1, -1):
        g = cot.pop(i, None)
        if g is None:
            continue
        _, parents, fn = tape.entries[i]
        for p, pg in zip(parents, fn(g)):
            if not p.requires_grad:
                continue
            if p._tape is tape and p._index >= 0:
                prev = cot.get(p._index)
                cot[p._index] = pg if prev is None else prev + pg
            else:
                p.grad = pg.copy() if p.grad is None else p.grad + pg


def numeric_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``x.data``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)


# DTNR v1 ---------------------------------------------------------------------

_MAGIC = b"DTNR"


def save_dtnr(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = _MAGIC + struct.pack("<BBB", 1, 0, arr.ndim) + b"\x00"
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + dims + arr.tobytes())


def load_dtnr(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a DTNR file")
    version, dtype, ndim = struct.unpack("<BBB", raw[4:7])
    if version != 1 or dtype != 0:
        raise ValueError(f"{path}: unsupported DTNR version {version} / dtype {dtype}")
    dims = struct.unpack(f"<{ndim}Q", raw[8:8 + 8 * ndim])
    payload = raw[8 + 8 * ndim:]
    count = int(np.prod(dims)) if ndim else 1
    if len(payload) != 8 * count:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, dims {dims} need {8 * count}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
