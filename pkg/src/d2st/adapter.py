"""Bottleneck adapters.

* ``adsta``  - dual pathway, each pathway an aDSTA module (D2ST-Adapter)
* ``conv3d`` - dual pathway, depthwise 1x3x3 / 3x1x1 conv + norm + GELU (DST-Adapter)
* ``none``   - no pathways, down -> GELU -> up (Vanilla-Adapter)

With ``residual`` on, the adapter output is ``x + adapter(x)``; the up
projection starts at zero so a fresh adapter is the identity map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adsta import Adsta, AdstaConfig
from .errors import ConfigurationError, DimensionError
from .layers import ChannelNorm, DepthwiseConv3d, LinearLayer, Module, channelnorm_forward, dwconv3d_forward
from .rng import SeededRng
from .tensor import Tensor, as_tensor, gelu

PATHWAY_KINDS = ("adsta", "conv3d", "none")


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck_ratio: float = 0.25
    pathway_kind: str = "adsta"
    spatial_cfg: AdstaConfig = field(default_factory=AdstaConfig.spatial)
    temporal_cfg: AdstaConfig = field(default_factory=AdstaConfig.temporal)
    spatial_conv: tuple = (1, 3, 3)
    temporal_conv: tuple = (3, 1, 1)
    spatial_path: bool = True
    temporal_path: bool = True
    residual: bool = True

    def __post_init__(self):
        if not 0.0 < self.bottleneck_ratio <= 1.0:
            raise ConfigurationError(f"bottleneck ratio must lie in (0, 1], got {self.bottleneck_ratio}")
        if self.pathway_kind not in PATHWAY_KINDS:
            raise ConfigurationError(f"unknown pathway kind {self.pathway_kind!r}")
        if self.pathway_kind != "none" and not (self.spatial_path or self.temporal_path):
            raise ConfigurationError("a dual-pathway adapter needs at least one pathway")

    def bottleneck(self, channels: int) -> int:
        reduced = int(math.floor(self.bottleneck_ratio * channels + 0.5))
        if reduced < 1:
            raise ConfigurationError(f"bottleneck ratio {self.bottleneck_ratio} leaves no channels of {channels}")
        return reduced


class ConvPathway(Module):
    """GELU(ChannelNorm(depthwise conv(v)))."""

    def __init__(self, channels: int, ksize, rng: SeededRng):
        self.conv = DepthwiseConv3d(channels, ksize, rng=rng)
        self.norm = ChannelNorm(channels)

    def __call__(self, v, trace=None) -> Tensor:
        return gelu(channelnorm_forward(dwconv3d_forward(v, self.conv), self.norm))


def dst_conv_pathways(v, spatial: ConvPathway, temporal: ConvPathway) -> tuple[Tensor, Tensor]:
    """Spatial (1x3x3) and temporal (3x1x1) branches evaluated on the same input."""
    return spatial(v), temporal(v)


class D2STAdapter(Module):
    def __init__(self, channels: int, shape, cfg: AdapterConfig, rng: SeededRng):
        self.channels = channels
        self.cfg = cfg
        reduced = cfg.bottleneck(channels)
        self.reduced = reduced
        self.down = LinearLayer(channels, reduced, rng=rng)
        self.up = LinearLayer(reduced, channels, init="zeros")
        self.spatial = self.temporal = None
        if cfg.pathway_kind == "adsta":
            if cfg.spatial_path:
                self.spatial = Adsta(reduced, shape, cfg.spatial_cfg, rng.child(1))
            if cfg.temporal_path:
                self.temporal = Adsta(reduced, shape, cfg.temporal_cfg, rng.child(2))
        elif cfg.pathway_kind == "conv3d":
            if cfg.spatial_path:
                self.spatial = ConvPathway(reduced, cfg.spatial_conv, rng.child(1))
            if cfg.temporal_path:
                self.temporal = ConvPathway(reduced, cfg.temporal_conv, rng.child(2))

    def pathways(self):
        return [(name, p) for name, p in (("spatial", self.spatial), ("temporal", self.temporal)) if p is not None]

    def __call__(self, x, trace: dict | None = None) -> Tensor:
        return adapter_forward(x, self, trace)


def adapter_forward(x, a: D2STAdapter, trace: dict | None = None) -> Tensor:
    """``GELU(F_S(x Wd) + F_T(x Wd)) Wu`` (+ x when residual)."""
    x = as_tensor(x)
    if x.shape[-1] != a.channels:
        raise DimensionError(f"adapter expects {a.channels} channels, got shape {x.shape}")
    v = a.down(x)
    paths = a.pathways()
    if paths:
        fused = None
        for name, path in paths:
            sub = {} if trace is not None else None
            out = path(v, trace=sub)
            if trace is not None and sub:
                trace[name] = sub
            fused = out if fused is None else fused + out
        h = gelu(fused)
    else:
        h = gelu(v)
    y = a.up(h)
    return x + y if a.cfg.residual else y


def vanilla_adapter_forward(x, down: LinearLayer, up: LinearLayer, residual: bool = True) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != down.c_in or down.c_out != up.c_in or up.c_out != down.c_in:
        raise DimensionError(f"channel chain {down.c_in}->{down.c_out}->{up.c_out} does not fit {x.shape}")
    y = up(gelu(down(x)))
    return x + y if residual else y


def _linear_count(c_in: int, c_out: int) -> int:
    return c_in * c_out + c_out


def _dw_count(ksize, channels: int) -> int:
    return int(np.prod(ksize)) * channels + channels


def _adsta_count(cfg: AdstaConfig, channels: int) -> int:
    n = _dw_count((3, 3, 3), channels)                  # offset depthwise
    n += _linear_count(channels, 3)                     # offset pointwise
    n += 4 * channels * channels                        # Wq, Wk, Wv, Wo
    if cfg.use_dpe:
        n += _dw_count((3, 3, 3), channels)
    return n


def count_tunable_params(cfg: AdapterConfig, channels: int) -> int:
    """Trainable scalars in one adapter instance."""
    reduced = cfg.bottleneck(channels)
    total = _linear_count(channels, reduced) + _linear_count(reduced, channels)
    if cfg.pathway_kind == "adsta":
        if cfg.spatial_path:
            total += _adsta_count(cfg.spatial_cfg, reduced)
        if cfg.temporal_path:
            total += _adsta_count(cfg.temporal_cfg, reduced)
    elif cfg.pathway_kind == "conv3d":
        if cfg.spatial_path:
            total += _dw_count(cfg.spatial_conv, reduced) + 2 * reduced
        if cfg.temporal_path:
            total += _dw_count(cfg.temporal_conv, reduced) + 2 * reduced
    return total
