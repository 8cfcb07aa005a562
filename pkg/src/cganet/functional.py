"""Differentiable operations on :class:`~cganet.autodiff.Variable`.

Each function computes its forward value with the shape-checked primitives
of :mod:`cganet.tensor` or :mod:`cganet.conv` and records a backward rule on
the active tape. Arrays and Python numbers passed where a Variable is
expected are treated as constants.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import conv as _conv
from . import tensor as T
from .autodiff import Variable, record
from .tensor import ShapeError


def _v(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(np.asarray(x))


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Variable:
    a, b = _v(a), _v(b)
    out = T.elementwise("add", a.value, b.value)
    return record("add", (a, b), out, lambda g: (g, g))


def sub(a, b) -> Variable:
    a, b = _v(a), _v(b)
    out = T.elementwise("sub", a.value, b.value)
    return record("sub", (a, b), out, lambda g: (g, -g))


def mul(a, b) -> Variable:
    a, b = _v(a), _v(b)
    av, bv = a.value, b.value
    out = T.elementwise("mul", av, bv)
    return record("mul", (a, b), out, lambda g: (g * bv, g * av))


def div(a, b) -> Variable:
    a, b = _v(a), _v(b)
    av, bv = a.value, b.value
    out = T.elementwise("div", av, bv)
    return record("div", (a, b), out, lambda g: (g / bv, -g * out / bv))


def neg(a) -> Variable:
    a = _v(a)
    return record("neg", (a,), T.elementwise("neg", a.value), lambda g: (-g,))


def exp(a) -> Variable:
    a = _v(a)
    out = T.elementwise("exp", a.value)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Variable:
    a = _v(a)
    av = a.value
    return record("log", (a,), T.elementwise("log", av), lambda g: (g / av,))


def relu(a) -> Variable:
    a = _v(a)
    av = a.value
    return record("relu", (a,), T.elementwise("relu", av), lambda g: (g * (av > 0),))


def square(a) -> Variable:
    a = _v(a)
    av = a.value
    return record("square", (a,), av * av, lambda g: (2.0 * g * av,))


def scale(a, c: float) -> Variable:
    a = _v(a)
    c = float(c)
    return record("scale", (a,), a.value * np.asarray(c, a.dtype), lambda g: (g * c,))


def add_scalar(a, c: float) -> Variable:
    a = _v(a)
    return record("add_scalar", (a,), a.value + np.asarray(c, a.dtype), lambda g: (g,))


# -- reductions and shape ops --------------------------------------------------

def sum(a, axes=None, keepdims: bool = False) -> Variable:  # noqa: A001
    a = _v(a)
    shape = a.shape
    out = T.reduce("sum", a.value, axes, keepdims)
    axes_t = T._normalize_axes(axes, a.value.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), np.asarray(out), bw)


def mean(a, axes=None, keepdims: bool = False) -> Variable:
    a = _v(a)
    axes_t = T._normalize_axes(axes, a.value.ndim)
    count = int(np.prod([a.shape[i] for i in axes_t])) if axes_t else 1
    return scale(sum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Variable:
    a = _v(a)
    old = a.shape
    out = T.reshape(a.value, shape)
    return record("reshape", (a,), out, lambda g: (g.reshape(old),))


def permute(a, order: Sequence[int]) -> Variable:
    a = _v(a)
    order = tuple(order)
    inv = tuple(np.argsort(order))
    out = T.permute(a.value, order)
    return record("permute", (a,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence, axis: int) -> Variable:
    vs = [_v(t) for t in tensors]
    out = T.concat([v.value for v in vs], axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vs])

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(np.ascontiguousarray(g[tuple(idx)]))
        return parts

    return record("concat", vs, out, bw)


def take(a, indices: Sequence[int], axis: int) -> Variable:
    """Select ``indices`` along ``axis`` (a gather with scatter-add backward)."""
    a = _v(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    out = np.take(a.value, idx, axis=axis)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return record("take", (a,), out, bw)


def broadcast_to(a, shape: Sequence[int]) -> Variable:
    """Explicit broadcast; the only route to implicit expansion in this package."""
    a = _v(a)
    shape = tuple(shape)
    src = a.shape
    if len(src) != len(shape) or any(s not in (1, t) for s, t in zip(src, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {src} to {shape}")
    out = np.ascontiguousarray(np.broadcast_to(a.value, shape))
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)
    return record("broadcast_to", (a,), out, lambda g: (g.sum(axis=axes, keepdims=True),))


def matmul(a, b) -> Variable:
    a, b = _v(a), _v(b)
    av, bv = a.value, b.value
    out = T.matmul(av, bv)
    return record("matmul", (a, b), out,
                  lambda g: (np.matmul(g, np.swapaxes(bv, -1, -2)), np.matmul(np.swapaxes(av, -1, -2), g)))


def softmax(a, axis: int) -> Variable:
    a = _v(a)
    out = T.softmax(a.value, axis)

    def bw(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record("softmax", (a,), out, bw)


def norm(a, axis: int) -> Variable:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = _v(a)
    av = a.value
    out = np.sqrt(np.sum(av * av, axis=axis))

    def bw(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g, axis) * np.where(n > 0, av / safe, 0.0),)

    return record("norm", (a,), out, bw)


# -- volumetric layers ---------------------------------------------------------

def _bias_add(out: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    if bias is None:
        return out
    return out + bias.reshape(1, -1, 1, 1, 1)


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Variable:
    x, weight = _v(x), _v(weight)
    inputs = [x, weight] + ([_v(bias)] if bias is not None else [])
    xv, wv = x.value, weight.value
    out = _bias_add(_conv.conv3d_forward(xv, wv, stride, padding), inputs[2].value if bias is not None else None)

    def bw(g):
        gx = _conv.conv3d_backward_input(g, wv, xv.shape[2:], stride, padding) if x.requires_grad else None
        gw = _conv.conv3d_backward_weight(g, xv, wv.shape[2:], stride, padding) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return record("conv3d", inputs, out, bw)


def conv_transpose3d(x, weight, bias=None, stride=2, padding=0, output_padding=0) -> Variable:
    x, weight = _v(x), _v(weight)
    inputs = [x, weight] + ([_v(bias)] if bias is not None else [])
    xv, wv = x.value, weight.value
    out = _conv.conv_transpose3d_forward(xv, wv, stride, padding, output_padding)
    out = _bias_add(out, inputs[2].value if bias is not None else None)

    def bw(g):
        gx = _conv.conv3d_forward(g, wv, stride, padding) if x.requires_grad else None
        # weight of a transposed conv is the conv weight seen from the other side
        gw = _conv.conv3d_backward_weight(xv, g, wv.shape[2:], stride, padding) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return record("conv_transpose3d", inputs, out, bw)


def batch_norm3d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Variable:
    """Per-channel normalization over (N, D, H, W).

    In training mode the running buffers are updated in place with the
    unbiased batch variance.
    """
    x, gamma, beta = _v(x), _v(gamma), _v(beta)
    xv = x.value
    if xv.ndim != 5:
        raise ShapeError(f"batch_norm3d: expected (N, C, D, H, W), got {xv.shape}")
    axes = (0, 2, 3, 4)
    m = xv.shape[0] * xv.shape[2] * xv.shape[3] * xv.shape[4]
    bshape = (1, -1, 1, 1, 1)
    if training:
        if m < 2:
            raise ValueError("batch_norm3d: need more than one value per channel in training mode")
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mu.reshape(bshape).astype(xv.dtype)) * inv_std.reshape(bshape)
    gv = gamma.value.reshape(bshape)
    out = xhat * gv + beta.value.reshape(bshape)

    def bw(g):
        ggamma = np.sum(g * xhat, axis=axes)
        gbeta = np.sum(g, axis=axes)
        gxhat = g * gv
        if training:
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - np.sum(gxhat, axis=axes, keepdims=True)
                - xhat * np.sum(gxhat * xhat, axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return (gx, ggamma, gbeta)

    return record("batch_norm3d", (x, gamma, beta), out, bw)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Variable:
    x = _v(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, x.dtype)
    return record("dropout", (x,), x.value * keep, lambda g: (g * keep,))
