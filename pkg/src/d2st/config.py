"""Run configuration: one JSON document that fully determines a run.

Every key has a default, unknown keys are rejected, and the resolved
configuration is embedded verbatim in every artifact a command writes.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .adapter import AdapterConfig
from .adsta import AdstaConfig, SamplingKernel
from .backbone import InsertionPolicy, ModelAssembly, ToyBackbone, assemble
from .errors import ConfigurationError, SchemaError
from .fewshot import METRICS
from .rng import derive_seed
from .synthvid import EpisodeSampler, spatial_pool, temporal_pool

OUT_DIR_ENV = "D2ST_OUT_DIR"

# stream keys under the master seed
_TRAIN_STREAM, _EVAL_STREAM, _VIZ_STREAM = 1, 2, 3


@dataclass
class RunConfig:
    # model geometry
    stages: int = 12
    channels: int = 32
    frames: int = 8
    image_size: int = 32
    tokens: int = 8
    backbone_seed: int = 0
    # adapter
    bottleneck_ratio: float = 0.25
    pathway_kind: str = "adsta"
    spatial_kernel: list = field(default_factory=lambda: [2, 4, 4])
    temporal_kernel: list = field(default_factory=lambda: [8, 2, 2])
    spatial_variant: str = "S"
    temporal_variant: str = "T"
    offset_range: float = 1.0
    heads: int = 1
    use_dpe: bool = True
    spatial_path: bool = True
    temporal_path: bool = True
    frame_local_spatial: bool = False
    residual: bool = True
    policy: str = "full"
    policy_stages: list = field(default_factory=list)
    # matching and episodes
    metric: str = "bimhm"
    temperature: float = 1.0
    family: str = "temporal"
    noise_sigma: float = 0.05
    train_variants: list = field(default_factory=lambda: [0, 10])
    eval_variants: list = field(default_factory=lambda: [10, 20])
    way: int = 5
    shot: int = 1
    queries: int = 5
    eval_episodes: int = 1000
    # optimization
    steps: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # run
    seed: int = 0
    workers: int = 1
    out_dir: str = ""

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise SchemaError("configuration must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise SchemaError(f"unknown configuration keys: {unknown}")
        defaults = cls()
        values = {}
        for key, value in data.items():
            expected = type(getattr(defaults, key))
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
                raise SchemaError(f"{key}: expected {expected.__name__}, got {type(value).__name__}")
            values[key] = value
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- derived objects ---------------------------------------------------
    def adapter_config(self) -> AdapterConfig:
        spatial = AdstaConfig(self.spatial_variant, SamplingKernel.from_triple(self.spatial_kernel),
                              self.offset_range, self.heads, self.use_dpe, self.frame_local_spatial)
        temporal = AdstaConfig(self.temporal_variant, SamplingKernel.from_triple(self.temporal_kernel),
                               self.offset_range, self.heads, self.use_dpe)
        return AdapterConfig(self.bottleneck_ratio, self.pathway_kind, spatial, temporal,
                             spatial_path=self.spatial_path, temporal_path=self.temporal_path,
                             residual=self.residual)

    def insertion_policy(self) -> InsertionPolicy:
        return InsertionPolicy(self.policy, tuple(self.policy_stages))

    def validate(self) -> "RunConfig":
        """Check every cross-module invariant before any work starts."""
        for name in ("stages", "channels", "frames", "image_size", "tokens", "way", "shot",
                     "eval_episodes", "workers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.queries < 1:
            raise ConfigurationError("queries must be at least 1")
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")
        if self.lr < 0 or self.temperature <= 0:
            raise ConfigurationError("lr must be non-negative and temperature positive")
        if self.metric not in METRICS:
            raise ConfigurationError(f"unknown metric {self.metric!r}")
        if self.family not in ("spatial", "temporal"):
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.image_size % self.tokens:
            raise ConfigurationError("image_size must be a multiple of tokens")
        for name in ("train_variants", "eval_variants"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or not 0 <= lo_hi[0] < lo_hi[1]:
                raise ConfigurationError(f"{name} must be a [start, stop) range")
        cfg = self.adapter_config()
        shape = (self.frames, self.tokens, self.tokens)
        if self.pathway_kind == "adsta":
            # building one adapter runs the kernel/shape/stride checks
            from .adapter import D2STAdapter
            from .rng import SeededRng
            D2STAdapter(self.channels, shape, cfg, SeededRng(0))
        else:
            cfg.bottleneck(self.channels)
        self.insertion_policy().resolve(self.stages)
        if len(self.class_pool("train")) < self.way:
            raise ConfigurationError(f"training pool too small for {self.way}-way episodes")
        return self

    def backbone(self) -> ToyBackbone:
        return ToyBackbone(self.stages, self.channels, self.frames, self.image_size, self.tokens,
                           self.backbone_seed)

    def build_model(self) -> ModelAssembly:
        return assemble(self.backbone(), self.insertion_policy(), self.adapter_config(), self.seed)

    def class_pool(self, split: str) -> list:
        if self.family == "spatial":
            return spatial_pool(self.noise_sigma)
        lo, hi = self.train_variants if split == "train" else self.eval_variants
        return temporal_pool(self.noise_sigma, range(lo, hi))

    def sampler(self, split: str) -> EpisodeSampler:
        stream = _TRAIN_STREAM if split == "train" else _EVAL_STREAM
        return EpisodeSampler(self.class_pool(split), self.way, self.shot, self.queries,
                              derive_seed(self.seed, stream), self.frames, self.image_size)

    def viz_seed(self) -> int:
        return derive_seed(self.seed, _VIZ_STREAM)

    def resolve_out_dir(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUT_DIR_ENV, "") or "runs")
