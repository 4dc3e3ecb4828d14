"""Dense row-major N-dimensional real arrays.

``Tensor`` is a thin immutable wrapper over a contiguous numpy array. The
public operations here validate their inputs and guarantee finite outputs;
the autograd layer works on the underlying arrays directly.
"""

from __future__ import annotations

import math
import os
from typing import Iterable, Sequence

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def precision_from_env(default: str = "f64") -> type:
    """Resolve the run precision from ``INFINET_PRECISION`` (f32 or f64)."""
    name = os.environ.get("INFINET_PRECISION", default)
    try:
        return PRECISIONS[name]
    except KeyError:
        raise ValueError(f"INFINET_PRECISION must be one of {sorted(PRECISIONS)}, got {name!r}")


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"unsupported precision {dtype}")
    return dtype


class Tensor:
    """Immutable dense array. ``shape`` is a tuple, ``elements`` the flat row-major view."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True, order="C")
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        _check_dtype(arr.dtype)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no-copy constructor for arrays this module just produced
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        arr.setflags(write=False)
        t._data = arr
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
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def elements(self) -> np.ndarray:
        return self._data.reshape(-1)

    def flat_index(self, index: Sequence[int]) -> int:
        if len(index) != self.ndim:
            raise IndexError(f"expected {self.ndim} indices, got {len(index)}")
        flat = 0
        for i, n in zip(index, self.shape):
            if not 0 <= i < n:
                raise IndexError(f"index {tuple(index)} out of range for shape {self.shape}")
            flat = flat * n + i
        return flat

    def __getitem__(self, index) -> float:
        if isinstance(index, int):
            index = (index,)
        return float(self.elements[self.flat_index(index)])

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, shape is {self.shape}")
        return float(self.elements[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def tolist(self):
        return self._data.tolist()

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self._data.astype(_check_dtype(dtype)))

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor._wrap(self._data.reshape(tuple(shape)))

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    __hash__ = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, data={self._data.tolist()!r})"

    def __add__(self, other):
        return elementwise_binary("add", self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return elementwise_binary("sub", self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return elementwise_binary("mul", self, _as_tensor(other, self.dtype))

    def __truediv__(self, other):
        return elementwise_binary("div", self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return elementwise_unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _finite(arr: np.ndarray, op: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return Tensor._wrap(arr)


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must have at least one dimension")
    if any(s < 1 for s in shape):
        raise ValueError(f"shape entries must be >= 1, got {shape}")
    return shape


def full(shape, value: float, dtype=np.float64) -> Tensor:
    shape = _check_shape(shape)
    if not math.isfinite(value):
        raise ValueError("fill value must be finite")
    return Tensor._wrap(np.full(shape, value, dtype=_check_dtype(dtype)))


def zeros(shape, dtype=np.float64) -> Tensor:
    return full(shape, 0.0, dtype)


def ones(shape, dtype=np.float64) -> Tensor:
    return full(shape, 1.0, dtype)


def scalar(value: float, dtype=np.float64) -> Tensor:
    return Tensor._wrap(np.asarray(value, dtype=_check_dtype(dtype)))


def eye(n: int, dtype=np.float64) -> Tensor:
    return Tensor._wrap(np.eye(n, dtype=_check_dtype(dtype)))


def rand_normal(shape, mean: float, stddev: float, seed: int, dtype=np.float64) -> Tensor:
    """Gaussian samples from a PCG64 stream seeded with ``seed``."""
    shape = _check_shape(shape)
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    rng = np.random.default_rng(seed)
    arr = mean + stddev * rng.standard_normal(shape)
    return Tensor._wrap(arr.astype(_check_dtype(dtype)))


def trunc_normal(shape, stddev: float, rng: np.random.Generator, dtype=np.float64, bound: float = 2.0) -> Tensor:
    """Zero-mean normal truncated to ``[-bound*stddev, bound*stddev]`` by resampling."""
    shape = _check_shape(shape)
    arr = rng.standard_normal(shape)
    bad = np.abs(arr) > bound
    while bad.any():
        arr[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(arr) > bound
    return Tensor._wrap((arr * stddev).astype(_check_dtype(dtype)))


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    """Trailing-dimension broadcast rule: align from the right, size-1 stretches."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and 1 not in (da, db):
            raise ValueError(f"shapes {tuple(a)} and {tuple(b)} are not broadcastable")
        out.append(max(da, db))
    return tuple(reversed(out))


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def elementwise_binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if kind not in _BINARY:
        raise ValueError(f"unknown binary op {kind!r}")
    broadcast_shape(a.shape, b.shape)
    if a.dtype != b.dtype:
        raise TypeError(f"precision mismatch: {a.dtype} vs {b.dtype}")
    if kind == "div" and np.any(b.data == 0):
        raise ZeroDivisionError("division by zero")
    return _finite(_BINARY[kind](a.data, b.data), kind)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


_UNARY = {
    "neg": np.negative,
    "exp": np.exp,
    "square": np.square,
    "sqrt": np.sqrt,
    "relu": lambda x: np.maximum(x, 0),
    "gelu": _gelu,
}


def elementwise_unary(kind: str, a: Tensor) -> Tensor:
    if kind not in _UNARY:
        raise ValueError(f"unknown unary op {kind!r}")
    if kind == "sqrt" and np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    with np.errstate(over="ignore"):
        out = _UNARY[kind](a.data)
    return _finite(np.asarray(out, dtype=a.dtype), kind)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"precision mismatch: {a.dtype} vs {b.dtype}")
    return _finite(a.data @ b.data, "matmul")


_REDUCE = {"sum": np.sum, "mean": np.mean, "max": np.max}


def reduce(kind: str, a: Tensor, axis: int | None = None) -> Tensor:
    if kind not in _REDUCE:
        raise ValueError(f"unknown reduction {kind!r}")
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for rank {a.ndim}")
    return _finite(np.asarray(_REDUCE[kind](a.data, axis=axis), dtype=a.dtype), kind)
