"""Parameterized layers: linear maps, depthwise/pointwise 3D convolutions and
per-channel normalization.  Feature maps are channel-last ``(..., T, H, W, C)``.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import DimensionError
from .ops import channelnorm, dwconv3d
from .rng import SeededRng
from .tensor import Parameter, Tensor, as_tensor


class Module:
    """Minimal container: parameters are discovered from attributes in
    assignment order, which keeps parameter naming deterministic."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.trainable or not trainable_only)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def _init(rng: SeededRng | None, shape, scale: float, init: str) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape)
    if init == "random":
        if rng is None:
            raise ValueError("random initialization needs an rng")
        return rng.normal(shape, scale)
    raise ValueError(f"unknown init {init!r}")


class LinearLayer(Module):
    def __init__(self, c_in: int, c_out: int, rng: SeededRng | None = None,
                 init: str = "random", bias: bool = True, trainable: bool = True):
        self.c_in, self.c_out = c_in, c_out
        self.weight = Parameter(_init(rng, (c_in, c_out), 1.0 / np.sqrt(c_in), init), trainable)
        self.bias = Parameter(np.zeros(c_out), trainable) if bias else None

    def __call__(self, x) -> Tensor:
        return linear_forward(x, self)


def linear_forward(x, layer: LinearLayer) -> Tensor:
    """``x @ W + b`` along the last axis."""
    x = as_tensor(x)
    if x.shape[-1] != layer.c_in:
        raise DimensionError(f"expected {layer.c_in} input channels, got shape {x.shape}")
    vector = x.ndim == 1
    y = (x.reshape((1, layer.c_in)) if vector else x) @ layer.weight
    if layer.bias is not None:
        y = y + layer.bias
    return y.reshape((layer.c_out,)) if vector else y


class PointwiseConv3d(LinearLayer):
    """A 1x1x1 convolution: the same linear map at every (t, h, w) position."""


class DepthwiseConv3d(Module):
    """One ``k_t x k_h x k_w`` filter per channel; kernel stored channel-last
    as ``(k_t, k_h, k_w, C)``."""

    def __init__(self, channels: int, ksize=(3, 3, 3), stride=(1, 1, 1),
                 rng: SeededRng | None = None, init: str = "random",
                 bias: bool = True, trainable: bool = True):
        self.channels = channels
        self.ksize = tuple(int(k) for k in ksize)
        self.stride = tuple(int(s) for s in stride)
        if any(k % 2 == 0 for k in self.ksize):
            raise DimensionError(f"kernel extents must be odd, got {self.ksize}")
        shape = self.ksize + (channels,)
        if init == "delta":
            kernel = np.zeros(shape)
            kernel[tuple(k // 2 for k in self.ksize)] = 1.0
        else:
            kernel = _init(rng, shape, 1.0 / np.sqrt(np.prod(self.ksize)), init)
        self.kernel = Parameter(kernel, trainable)
        self.bias = Parameter(np.zeros(channels), trainable) if bias else None

    def __call__(self, x) -> Tensor:
        return dwconv3d_forward(x, self)


def dwconv3d_forward(x, layer: DepthwiseConv3d, stride=None) -> Tensor:
    return dwconv3d(x, layer.kernel, layer.bias, layer.stride if stride is None else stride)


class ChannelNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-8, trainable: bool = True):
        self.channels = channels
        self.eps = eps
        self.scale = Parameter(np.ones(channels), trainable)
        self.shift = Parameter(np.zeros(channels), trainable)

    def __call__(self, x) -> Tensor:
        return channelnorm_forward(x, self)


def channelnorm_forward(x, layer: ChannelNorm) -> Tensor:
    """Instance-style normalization over (T, H, W), then per-channel affine."""
    return channelnorm(x, layer.scale, layer.shift, layer.eps)
