"""Parameterized layers and a tiny module system."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .autodiff import Variable


class Module:
    """Container that discovers parameters, buffers and submodules by attribute."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Variable]:
        out: dict[str, Variable] = {}
        for name, value in self._children():
            key = f"{prefix}{name}"
            if isinstance(value, Variable) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, value in getattr(self, "_buffers", {}).items():
            out[f"{prefix}{name}"] = value
        for name, value in self._children():
            key = f"{prefix}{name}"
            if isinstance(value, Module):
                out.update(value.named_buffers(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{key}.{i}."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.named_parameters().values())


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = math.sqrt(2.0)) -> np.ndarray:
    """Zero-mean normal with std ``gain / sqrt(fan_in)``; the default gain suits ReLU inputs."""
    return (rng.standard_normal(shape) * (gain / math.sqrt(fan_in))).astype(dtype)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
                 bias: bool = True, rng: np.random.Generator | None = None, dtype=np.float32,
                 gain: float = math.sqrt(2.0)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = c_in * kernel ** 3
        self.weight = Variable(he_normal(rng, (c_out, c_in, kernel, kernel, kernel), fan_in, dtype, gain), True)
        self.bias = Variable(np.zeros(c_out, dtype), True) if bias else None

    def __call__(self, x: Variable) -> Variable:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 2, stride: int = 2, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32, gain: float = math.sqrt(2.0)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        fan_in = c_in * kernel ** 3 // stride ** 3
        self.weight = Variable(he_normal(rng, (c_in, c_out, kernel, kernel, kernel), max(fan_in, 1), dtype, gain),
                               True)
        self.bias = Variable(np.zeros(c_out, dtype), True) if bias else None

    def __call__(self, x: Variable) -> Variable:
        return F.conv_transpose3d(x, self.weight, self.bias, self.stride)


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Variable(np.ones(channels, dtype), True)
        self.beta = Variable(np.zeros(channels, dtype), True)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype),
            "running_var": np.ones(channels, dtype),
        }
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Variable) -> Variable:
        return F.batch_norm3d(x, self.gamma, self.beta, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator | None = None):
        self.p = p
        self._rng = rng

    def __call__(self, x: Variable) -> Variable:
        return F.dropout(x, self.p, self._rng, self.training)


class ResBlock(Module):
    """Pre-activation residual block: BN, ReLU, Conv3, BN, ReLU, Conv3, then add the input."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.bn1 = BatchNorm3d(channels, dtype=dtype)
        self.conv1 = Conv3d(channels, channels, 3, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm3d(channels, dtype=dtype)
        self.conv2 = Conv3d(channels, channels, 3, rng=rng, dtype=dtype)

    def __call__(self, x: Variable) -> Variable:
        h = self.conv1(F.relu(self.bn1(x)))
        h = self.conv2(F.relu(self.bn2(h)))
        return F.add(h, x)
