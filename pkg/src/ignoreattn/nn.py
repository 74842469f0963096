"""Layers with learnable parameters: linear, conv, batch norm, and pooling helpers."""
from __future__ import annotations

import zlib

import numpy as np

from . import ops
from .autograd import Variable, as_variable


class Parameter(Variable):
    """A trainable leaf. ``decay`` marks it for weight decay."""

    def __init__(self, value, name: str, decay: bool = False):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.decay = decay


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed on (seed, parameter name).

    Keying by name keeps a layer's initial weights independent of which
    other layers exist in the model.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def he_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Minimal container: parameters and sub-modules are found by attribute walk."""

    def modules(self):
        yield self
        for val in vars(self).values():
            children = val if isinstance(val, (list, tuple)) else (val,)
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules()

    def named_parameters(self):
        for mod in self.modules():
            for val in vars(mod).values():
                if isinstance(val, Parameter):
                    yield val.name, val

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, name: str, seed: int = 0,
                 bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.use_bias = bias
        w = he_normal((out_features, in_features), in_features, param_rng(seed, name + ".weight"))
        self.weight = Parameter(w, name + ".weight", decay=True)
        self.bias = Parameter(np.zeros(out_features), name + ".bias") if bias else None

    def __call__(self, x) -> Variable:
        x = as_variable(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected input [n, {self.in_features}], got {x.shape}")
        out = ops.matmul(x, ops.transpose(self.weight))
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, name: str,
                 seed: int = 0, stride: int = 1, padding: int = 0, bias: bool = False):
        if kernel_size < 1 or stride < 1:
            raise ValueError("kernel size and stride must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(he_normal(shape, fan_in, param_rng(seed, name + ".weight")),
                                name + ".weight", decay=True)
        self.bias = Parameter(np.zeros(out_channels), name + ".bias") if bias else None

    def __call__(self, x) -> Variable:
        return ops.conv2d(x, self.weight, self.bias, stride=(self.stride, self.stride),
                          padding=(self.padding, self.padding))


class BatchNorm2d(Module):
    def __init__(self, channels: int, name: str, eps: float = 1e-5, momentum: float = 0.1):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), name + ".gamma")
        self.beta = Parameter(np.zeros(channels), name + ".beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x, mode: str = "train") -> Variable:
        x = as_variable(x)
        if mode == "train":
            n, _, h, w = x.shape
            m = n * h * w
            if m < 2:
                raise ValueError("train-mode batch norm needs at least 2 values per channel")
            out, mu, var = ops.batch_norm_train(x, self.gamma, self.beta, self.eps)
            unbiased = var * m / (m - 1)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
            return out
        if mode != "eval":
            raise ValueError(f"unknown mode {mode!r}")
        shift = self.running_mean.reshape(1, -1, 1, 1)
        inv_std = 1.0 / np.sqrt(self.running_var.reshape(1, -1, 1, 1) + self.eps)
        xhat = ops.mul(ops.sub(x, shift), inv_std)
        gamma = ops.reshape(self.gamma, (1, -1, 1, 1))
        beta = ops.reshape(self.beta, (1, -1, 1, 1))
        return ops.add(ops.mul(xhat, gamma), beta)


def global_pool(kind: str, x) -> Variable:
    """Per-channel average or max over H, W: [N,C,H,W] -> [N,C,1,1]."""
    x = as_variable(x)
    if x.ndim != 4:
        raise ValueError("global_pool expects [N,C,H,W]")
    if kind == "avg":
        return ops.mean(x, axes=(2, 3), keepdims=True)
    if kind == "max":
        return ops.max(x, axes=(2, 3), keepdims=True)
    raise ValueError(f"unknown pool kind {kind!r}")


def channel_pool(kind: str, x) -> Variable:
    """Per-pixel average or max over channels: [N,C,H,W] -> [N,1,H,W]."""
    x = as_variable(x)
    if x.ndim != 4:
        raise ValueError("channel_pool expects [N,C,H,W]")
    if kind == "avg":
        return ops.mean(x, axes=1, keepdims=True)
    if kind == "max":
        return ops.max(x, axes=1, keepdims=True)
    raise ValueError(f"unknown pool kind {kind!r}")
