"""Anisotropic deformable spatio-temporal attention.

Pipeline for one feature map ``F (T, H, W, C')``::

    F' = F + dwconv3x3x3(F)                      # dynamic position embedding
    grid = cell centres of an <n_t, n_s, n_s> lattice
    offsets = tanh(pw(gelu(strided_dwconv(F')))) * lambda * half_cell
    points = clamp(grid + offsets)
    P = trilinear(F', points)                    # (M, C') shared keys/values
    Z = softmax(F' Wq (P Wk)^T / sqrt(d)) P Wv Wo
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .layers import DepthwiseConv3d, Module, PointwiseConv3d
from .ops import conv_output_shape, dwconv3d, trilinear
from .rng import SeededRng
from .tensor import Parameter, Tensor, as_tensor, clip, gelu, softmax, tanh

VARIANTS = ("S", "T", "Uniform")


@dataclass(frozen=True)
class SamplingKernel:
    """Reference-point densities <n_t, n_s, n_s>."""

    n_t: int
    n_s: int

    def __post_init__(self):
        if self.n_t < 1 or self.n_s < 1:
            raise ConfigurationError(f"sampling densities must be positive, got {self}")

    @classmethod
    def from_triple(cls, triple) -> "SamplingKernel":
        n_t, n_h, n_w = (int(v) for v in triple)
        if n_h != n_w:
            raise ConfigurationError(f"spatial densities must match, got {tuple(triple)}")
        return cls(n_t, n_h)

    @property
    def point_count(self) -> int:
        return self.n_t * self.n_s * self.n_s

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.n_t, self.n_s, self.n_s)

    def check_fits(self, shape) -> None:
        T, H, W = shape
        if self.n_t > T or self.n_s > min(H, W):
            raise ConfigurationError(f"kernel {self.triple} exceeds feature extent {tuple(shape)}")


# Tuned kernels per backbone feature map: (backbone, (T, H, W), S, T, Uniform).
TUNED_KERNELS = (
    ("ResNet-50", (8, 56, 56), (2, 8, 8), (8, 4, 4), (4, 4, 4)),
    ("ResNet-50", (8, 28, 28), (2, 4, 4), (8, 2, 2), (4, 4, 4)),
    ("ResNet-50", (8, 14, 14), (2, 4, 4), (8, 2, 2), (4, 4, 4)),
    ("ResNet-50", (8, 7, 7), (2, 2, 2), (8, 1, 1), (4, 4, 4)),
    ("CLIP-ViT-B", (8, 14, 14), (2, 4, 4), (8, 2, 2), (4, 4, 4)),
)


def check_variant(variant: str, kernel: SamplingKernel) -> None:
    if variant == "S" and not kernel.n_s > kernel.n_t:
        raise ConfigurationError(f"variant S needs n_s > n_t, got {kernel.triple}")
    if variant == "T" and not kernel.n_t > kernel.n_s:
        raise ConfigurationError(f"variant T needs n_t > n_s, got {kernel.triple}")
    if variant == "Uniform" and kernel.n_t != kernel.n_s:
        raise ConfigurationError(f"variant Uniform needs n_t == n_s, got {kernel.triple}")
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class AdstaConfig:
    variant: str
    kernel: SamplingKernel
    offset_range: float = 1.0
    heads: int = 1
    use_dpe: bool = True
    # attend within each frame only (time folded into the batch axis)
    frame_local: bool = False

    def __post_init__(self):
        check_variant(self.variant, self.kernel)
        if self.offset_range <= 0:
            raise ConfigurationError("offset_range must be positive")
        if self.heads < 1:
            raise ConfigurationError("heads must be positive")

    @classmethod
    def spatial(cls, triple=(2, 4, 4), **kw) -> "AdstaConfig":
        return cls("S", SamplingKernel.from_triple(triple), **kw)

    @classmethod
    def temporal(cls, triple=(8, 2, 2), **kw) -> "AdstaConfig":
        return cls("T", SamplingKernel.from_triple(triple), **kw)

    def effective(self, shape) -> tuple[tuple[int, int, int], SamplingKernel]:
        """Feature extent and kernel actually used by the attention."""
        T, H, W = shape
        if self.frame_local:
            return (1, H, W), SamplingKernel(1, self.kernel.n_s)
        return (T, H, W), self.kernel


def cell_centers(extent: int, density: int) -> np.ndarray:
    return (np.arange(density) + 0.5) * extent / density - 0.5


def sample_reference_grid(shape, kernel: SamplingKernel) -> np.ndarray:
    """Cell-centre reference points, ``(M, 3)`` in row-major (t, h, w) order."""
    kernel.check_fits(shape)
    T, H, W = shape
    axes = (cell_centers(T, kernel.n_t), cell_centers(H, kernel.n_s), cell_centers(W, kernel.n_s))
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    assert grid.shape[0] == kernel.point_count
    return grid


def offset_strides(shape, kernel: SamplingKernel) -> tuple[int, int, int]:
    """Integer strides of the offset network's depthwise conv, one output per cell."""
    dens = kernel.triple
    strides = tuple(math.ceil(L / n) for L, n in zip(shape, dens))
    if conv_output_shape(tuple(shape), (3, 3, 3), strides) != dens:
        raise ConfigurationError(f"no stride maps extent {tuple(shape)} onto kernel {dens}")
    return strides


def dpe_apply(x, dpe: DepthwiseConv3d) -> Tensor:
    """Dynamic position embedding: ``x + dwconv(x)``."""
    x = as_tensor(x)
    if dpe.channels != x.shape[-1]:
        raise DimensionError(f"DPE has {dpe.channels} channels, input has shape {x.shape}")
    return x + dwconv3d(x, dpe.kernel, dpe.bias, (1, 1, 1))


class OffsetNet(Module):
    """Strided depthwise 3x3x3 conv, GELU, then a pointwise map to 3 offsets."""

    def __init__(self, channels: int, shape, kernel: SamplingKernel, offset_range: float,
                 rng: SeededRng):
        self.shape = tuple(shape)
        self.kernel = kernel
        self.offset_range = float(offset_range)
        stride = offset_strides(self.shape, kernel)
        self.depthwise = DepthwiseConv3d(channels, (3, 3, 3), stride, rng=rng)
        self.pointwise = PointwiseConv3d(channels, 3, init="zeros")

    @property
    def max_offset(self) -> np.ndarray:
        """Per-axis bound lambda * half cell extent."""
        return self.offset_range * np.array(self.shape) / (2.0 * np.array(self.kernel.triple))

    def __call__(self, fmap) -> Tensor:
        fmap = as_tensor(fmap)
        if tuple(fmap.shape[-4:-1]) != self.shape:
            raise ConfigurationError(f"offset net built for {self.shape}, got map {fmap.shape}")
        h = gelu(self.depthwise(fmap))
        raw = self.pointwise(h)
        off = tanh(raw) * self.max_offset
        return off.reshape(fmap.shape[:-4] + (self.kernel.point_count, 3))


def predict_offsets(fmap, grid: np.ndarray, net: OffsetNet) -> Tensor:
    if grid.shape != (net.kernel.point_count, 3):
        raise ConfigurationError(f"grid of {grid.shape[0]} points does not match kernel {net.kernel.triple}")
    return net(fmap)


def shift_points(grid: np.ndarray, offsets, shape) -> Tensor:
    """Add offsets to the reference grid and clamp into ``[0, L-1]``."""
    hi = np.array(shape, dtype=float) - 1.0
    return clip(as_tensor(offsets) + grid, 0.0, hi)


def trilinear_sample(fmap, points) -> Tensor:
    """Features at continuous ``points (..., M, 3)`` of ``fmap (..., T, H, W, C)``."""
    return trilinear(fmap, points)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead = x.shape[:-2]
    n, c = x.shape[-2:]
    x = x.reshape(lead + (n, heads, c // heads))
    k = len(lead)
    return x.transpose(tuple(range(k)) + (k + 1, k, k + 2))


def sparse_attention(fmap, points, wq, wk, wv, wo, heads: int = 1,
                     return_weights: bool = False):
    """Every token of ``fmap`` attends to the rows of ``points`` (``(..., M, C)``).

    Returns the output map and, if requested, the attention weights with
    shape ``(..., heads, T*H*W, M)``.
    """
    fmap, points = as_tensor(fmap), as_tensor(points)
    lead = fmap.shape[:-4]
    T, H, W, C = fmap.shape[-4:]
    M = points.shape[-2]
    if M == 0:
        raise ConfigurationError("sparse attention needs at least one point")
    if C % heads:
        raise ConfigurationError(f"{heads} heads do not divide {C} channels")
    if points.shape[-1] != C:
        raise DimensionError(f"points have {points.shape[-1]} channels, map has {C}")
    d = C // heads
    k = len(lead)
    q = _split_heads(fmap.reshape(lead + (T * H * W, C)) @ wq, heads)
    keys = _split_heads(points @ wk, heads)
    vals = _split_heads(points @ wv, heads)
    keys_t = keys.transpose(tuple(range(k + 1)) + (k + 2, k + 1))
    weights = softmax((q @ keys_t) * (1.0 / math.sqrt(d)))
    out = weights @ vals
    out = out.transpose(tuple(range(k)) + (k + 1, k, k + 2)).reshape(lead + (T * H * W, C))
    z = (out @ wo).reshape(lead + (T, H, W, C))
    return (z, weights) if return_weights else z


def point_importance(weights) -> np.ndarray:
    """Attention mass each point receives, summed over all queries.

    ``weights`` is ``(..., N, M)`` with softmax-normalized rows; the result is
    ``(..., M)`` and sums to ``N``.
    """
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights)
    if w.ndim < 2:
        raise ContractError("attention weights need a (queries, points) layout")
    if not np.allclose(w.sum(axis=-1), 1.0, rtol=0.0, atol=1e-6) or np.any(w < 0):
        raise ContractError("attention rows are not softmax-normalized")
    return w.sum(axis=-2)


class Adsta(Module):
    """One aDSTA pathway bound to a feature extent ``(T, H, W)``."""

    def __init__(self, channels: int, shape, cfg: AdstaConfig, rng: SeededRng):
        self.channels = channels
        self.full_shape = tuple(shape)
        self.cfg = cfg
        cfg.kernel.check_fits(self.full_shape)
        self.shape, self.kernel = cfg.effective(self.full_shape)
        self.grid = sample_reference_grid(self.shape, self.kernel)
        if channels % cfg.heads:
            raise ConfigurationError(f"{cfg.heads} heads do not divide {channels} channels")
        self.dpe = DepthwiseConv3d(channels, (3, 3, 3), rng=rng) if cfg.use_dpe else None
        self.offset_net = OffsetNet(channels, self.shape, self.kernel, cfg.offset_range, rng)
        scale = 1.0 / math.sqrt(channels)
        self.wq = Parameter(rng.normal((channels, channels), scale))
        self.wk = Parameter(rng.normal((channels, channels), scale))
        self.wv = Parameter(rng.normal((channels, channels), scale))
        self.wo = Parameter(rng.normal((channels, channels), scale))

    def __call__(self, x, trace: dict | None = None) -> Tensor:
        return adsta_forward(x, self, trace)


def adsta_forward(x, mod: Adsta, trace: dict | None = None) -> Tensor:
    """DPE, reference grid, offsets, shift and clamp, trilinear sampling, sparse attention."""
    x = as_tensor(x)
    if tuple(x.shape[-4:-1]) != mod.full_shape or x.shape[-1] != mod.channels:
        raise DimensionError(f"aDSTA built for {mod.full_shape + (mod.channels,)}, got {x.shape}")
    lead = x.shape[:-4]
    T, H, W, C = x.shape[-4:]
    if mod.cfg.frame_local:
        x = x.reshape(lead + (T, 1, H, W, C))
    f = dpe_apply(x, mod.dpe) if mod.dpe is not None else x
    offsets = predict_offsets(f, mod.grid, mod.offset_net)
    points = shift_points(mod.grid, offsets, mod.shape)
    feats = trilinear_sample(f, points)
    z, weights = sparse_attention(f, feats, mod.wq, mod.wk, mod.wv, mod.wo,
                                  mod.cfg.heads, return_weights=True)
    if trace is not None:
        _record(trace, mod, points.data, offsets.data, weights.data.mean(axis=-3), (T, H, W))
    return z.reshape(lead + (T, H, W, C)) if mod.cfg.frame_local else z


def _record(trace: dict, mod: Adsta, points, offsets, weights, shape) -> None:
    importance = point_importance(weights)
    if mod.cfg.frame_local:
        # points are per frame: restore the frame index as the t coordinate
        T = shape[0]
        frames = np.broadcast_to(np.arange(T, dtype=points.dtype)[:, None], points.shape[:-1])
        points = points.copy()
        points[..., 0] = frames
        lead = points.shape[:-3]
        points = points.reshape(lead + (-1, 3))
        offsets = offsets.reshape(lead + (-1, 3))
        importance = importance.reshape(lead + (-1,))
        weights = None
    trace.update(points=points, offsets=offsets, importance=importance, weights=weights)
