"""Shape-checked numeric primitives.

Tensors are plain ``numpy.ndarray`` values in row-major ``(N, C, D, H, W)``
layout. The functions here add the strict shape discipline the rest of the
package relies on: binary ops demand identical shapes, reductions refuse
empty extents, and every failure raises :class:`ShapeError` naming the
offending shapes.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# "strict": division by an exact zero raises. "permissive": IEEE propagation.
_DIV_MODE = "strict"


class OpCounter:
    """Tally of multiply-accumulates executed by matmul and convolution kernels."""

    def __init__(self):
        self.matmul = 0
        self.conv = 0

    @property
    def total(self) -> int:
        return self.matmul + self.conv


_COUNTERS: list[OpCounter] = []


@contextlib.contextmanager
def count_ops():
    """Count multiply-accumulates of every matmul/conv run inside the block."""
    counter = OpCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _tally(kind: str, n: int) -> None:
    for c in _COUNTERS:
        setattr(c, kind, getattr(c, kind) + int(n))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on NaN inputs or strict-mode division by zero."""


def set_division_mode(mode: str) -> None:
    global _DIV_MODE
    if mode not in ("strict", "permissive"):
        raise ValueError(f"unknown division mode {mode!r}")
    _DIV_MODE = mode


def division_mode() -> str:
    return _DIV_MODE


def as_tensor(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype.kind in "iub":
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


_UNARY = {
    "relu": lambda a: np.maximum(a, 0),
    "exp": np.exp,
    "log": np.log,
    "neg": np.negative,
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``op`` elementwise. Binary ops require identical shapes."""
    a = np.asarray(a)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return _UNARY[op](a)
    if b is None:
        raise TypeError(f"{op} needs two operands")
    b = np.asarray(b)
    _check_same(a, b, op)
    if op in _BINARY:
        return _BINARY[op](a, b)
    if op == "div":
        if _DIV_MODE == "strict" and np.any(b == 0):
            raise NumericError(f"div: exact zero in divisor of shape {b.shape}")
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, a, axes=None, keepdims: bool = False) -> np.ndarray:
    """Reduce ``a`` over ``axes`` with ``op`` in {sum, mean, max, argmax}."""
    a = np.asarray(a)
    axes_t = _normalize_axes(axes, a.ndim)
    for ax in axes_t:
        if a.shape[ax] == 0:
            raise ShapeError(f"{op}: empty extent on axis {ax} of {a.shape}")
    if a.size == 0:
        raise ShapeError(f"{op}: empty tensor {a.shape}")
    if op == "sum":
        return np.sum(a, axis=axes_t, keepdims=keepdims)
    if op == "mean":
        return np.mean(a, axis=axes_t, keepdims=keepdims)
    if op == "max":
        return np.max(a, axis=axes_t, keepdims=keepdims)
    if op == "argmax":
        if len(axes_t) != 1:
            raise ShapeError("argmax takes exactly one axis")
        return np.argmax(a, axis=axes_t[0], keepdims=keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def reshape(a, shape: Sequence[int]) -> np.ndarray:
    a = np.asarray(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return a.reshape(shape)


def permute(a, order: Sequence[int]) -> np.ndarray:
    a = np.asarray(a)
    order = tuple(order)
    if sorted(order) != list(range(a.ndim)):
        raise ShapeError(f"permute: {order} is not a permutation of rank {a.ndim}")
    return np.ascontiguousarray(a.transpose(order))


def concat(tensors: Iterable, axis: int) -> np.ndarray:
    tensors = [np.asarray(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    return np.concatenate(tensors, axis=ax)


def matmul(a, b) -> np.ndarray:
    """Matrix product over the last two axes; leading batch axes must match."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ {a.shape} x {b.shape}")
    if _COUNTERS:
        batch = int(np.prod(a.shape[:-2], dtype=np.int64))
        _tally("matmul", batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return np.matmul(a, b)


def softmax(a, axis: int) -> np.ndarray:
    a = np.asarray(a)
    if np.isnan(a).any():
        raise NumericError("softmax: NaN input")
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)
