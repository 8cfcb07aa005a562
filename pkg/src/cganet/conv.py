"""Direct 3D convolution kernels on raw arrays.

All routines loop over kernel offsets in (kd, kh, kw) row-major order and
contract channels with a BLAS product per offset, so summation order is
fixed for a given shape. The transposed convolution is defined as the exact
adjoint of :func:`conv3d_forward`, which is what makes its gradient the
forward convolution.
"""
from __future__ import annotations

import itertools

import numpy as np

from .tensor import ShapeError, _COUNTERS, _tally


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def convT_output_extent(n: int, k: int, stride: int, pad: int, out_pad: int = 0) -> int:
    return (n - 1) * stride - 2 * pad + k + out_pad


def _out_spatial(spatial, ks, stride, pad):
    out = tuple(conv_output_extent(n, k, s, p) for n, k, s, p in zip(spatial, ks, stride, pad))
    if any(o < 1 for o in out):
        raise ShapeError(f"conv3d: input extents {spatial} too small for kernel {ks} with padding {pad}")
    return out


def _pad(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _window(off, n_out, s):
    return slice(off, off + s * (n_out - 1) + 1, s)


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride=1, padding=0) -> np.ndarray:
    """Cross-correlate ``x`` (N, C, D, H, W) with ``w`` (Co, C, kd, kh, kw)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    stride, pad = _triple(stride), _triple(padding)
    ks = w.shape[2:]
    out_sp = _out_spatial(x.shape[2:], ks, stride, pad)
    if _COUNTERS:
        _tally("conv", x.shape[0] * w.shape[1] * int(np.prod(ks)) * int(np.prod(out_sp)) * w.shape[0])
    xp = _pad(x, pad)
    n = x.shape[0]
    out = np.zeros((w.shape[0], n) + out_sp, dtype=np.result_type(x, w))
    for a, b, c in itertools.product(*(range(k) for k in ks)):
        patch = xp[:, :, _window(a, out_sp[0], stride[0]), _window(b, out_sp[1], stride[1]),
                   _window(c, out_sp[2], stride[2])]
        out += np.tensordot(w[:, :, a, b, c], patch, axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def conv3d_backward_input(gout: np.ndarray, w: np.ndarray, in_spatial, stride=1, padding=0) -> np.ndarray:
    """Adjoint of :func:`conv3d_forward` with respect to its input."""
    stride, pad = _triple(stride), _triple(padding)
    ks = w.shape[2:]
    out_sp = gout.shape[2:]
    if gout.shape[1] != w.shape[0]:
        raise ShapeError(f"conv3d adjoint: gradient has {gout.shape[1]} channels, weight gives {w.shape[0]}")
    padded = tuple(n + 2 * p for n, p in zip(in_spatial, pad))
    n = gout.shape[0]
    gx = np.zeros((w.shape[1], n) + padded, dtype=np.result_type(gout, w))
    for a, b, c in itertools.product(*(range(k) for k in ks)):
        contrib = np.tensordot(w[:, :, a, b, c], gout, axes=([0], [1]))
        gx[:, :, _window(a, out_sp[0], stride[0]), _window(b, out_sp[1], stride[1]),
           _window(c, out_sp[2], stride[2])] += contrib
    gx = gx[:, :, pad[0]:pad[0] + in_spatial[0], pad[1]:pad[1] + in_spatial[1],
            pad[2]:pad[2] + in_spatial[2]]
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3, 4))


def conv3d_backward_weight(gout: np.ndarray, x: np.ndarray, kernel, stride=1, padding=0) -> np.ndarray:
    """Gradient of :func:`conv3d_forward` with respect to its weight."""
    stride, pad = _triple(stride), _triple(padding)
    ks = _triple(kernel)
    out_sp = gout.shape[2:]
    xp = _pad(x, pad)
    gw = np.zeros((gout.shape[1], x.shape[1]) + ks, dtype=np.result_type(gout, x))
    for a, b, c in itertools.product(*(range(k) for k in ks)):
        patch = xp[:, :, _window(a, out_sp[0], stride[0]), _window(b, out_sp[1], stride[1]),
                   _window(c, out_sp[2], stride[2])]
        gw[:, :, a, b, c] = np.tensordot(gout, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def conv_transpose3d_forward(x: np.ndarray, w: np.ndarray, stride=2, padding=0, output_padding=0) -> np.ndarray:
    """Transposed convolution; ``w`` has shape (C_in, C_out, kd, kh, kw)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv_transpose3d: expected 5-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: input has {x.shape[1]} channels, weight expects {w.shape[0]}")
    stride, pad, opad = _triple(stride), _triple(padding), _triple(output_padding)
    out_sp = tuple(
        convT_output_extent(n, k, s, p, o)
        for n, k, s, p, o in zip(x.shape[2:], w.shape[2:], stride, pad, opad)
    )
    return conv3d_backward_input(x, w, out_sp, stride, pad)
