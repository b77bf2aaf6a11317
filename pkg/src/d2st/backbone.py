"""Frozen toy backbone, adapter insertion and the frozen/tunable split."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .adapter import AdapterConfig, D2STAdapter
from .errors import ConfigurationError, DimensionError
from .layers import ChannelNorm, LinearLayer, Module, PointwiseConv3d, channelnorm_forward
from .rng import SeededRng, derive_seed
from .tensor import Parameter, Tensor, as_tensor, gelu

POLICY_KINDS = ("early", "late", "skip", "full", "none")


class Stage(Module):
    """Frozen token mixer: ``x + GELU(norm(pointwise(x)))``."""

    def __init__(self, channels: int, rng: SeededRng):
        self.mixer = PointwiseConv3d(channels, channels, rng=rng, trainable=False)
        self.norm = ChannelNorm(channels, trainable=False)

    def __call__(self, x) -> Tensor:
        return x + gelu(channelnorm_forward(self.mixer(x), self.norm))


class ToyBackbone(Module):
    def __init__(self, stage_count: int = 12, channels: int = 32, frames: int = 8,
                 image_size: int = 32, tokens: int = 8, seed: int = 0):
        if image_size % tokens:
            raise ConfigurationError(f"image size {image_size} is not a multiple of the token grid {tokens}")
        if stage_count < 1:
            raise ConfigurationError("backbone needs at least one stage")
        self.stage_count = stage_count
        self.channels = channels
        self.frames = frames
        self.image_size = image_size
        self.tokens = tokens
        self.seed = seed
        self.patch = image_size // tokens
        rng = SeededRng(seed)
        self.embed = LinearLayer(self.patch * self.patch * 3, channels, rng=rng.child(0), trainable=False)
        self.embed_norm = ChannelNorm(channels, trainable=False)
        self.stages = [Stage(channels, rng.child(i)) for i in range(1, stage_count + 1)]

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (self.frames, self.tokens, self.tokens)

    def patchify(self, frames) -> np.ndarray:
        x = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
        lead = x.shape[:-4]
        T, Hi, Wi, ch = x.shape[-4:]
        if T != self.frames or Hi != self.image_size or Wi != self.image_size or ch != 3:
            raise DimensionError(
                f"expected frames (..., {self.frames}, {self.image_size}, {self.image_size}, 3), got {x.shape}")
        g, p = self.tokens, self.patch
        x = x.reshape(lead + (T, g, p, g, p, 3))
        k = len(lead)
        x = x.transpose(tuple(range(k)) + tuple(k + i for i in (0, 1, 3, 2, 4, 5)))
        return x.reshape(lead + (T, g, g, p * p * 3))

    def embed_frames(self, frames) -> Tensor:
        return channelnorm_forward(self.embed(as_tensor(self.patchify(frames))), self.embed_norm)


@dataclass(frozen=True)
class InsertionPolicy:
    kind: str = "full"
    stages: tuple = ()

    def resolve(self, stage_count: int) -> tuple[int, ...]:
        """1-based stage ids that receive an adapter."""
        half = stage_count // 2
        if self.kind == "early":
            ids = list(range(1, half + 1))
        elif self.kind == "late":
            ids = list(range(stage_count - half + 1, stage_count + 1))
        elif self.kind == "skip":
            ids = list(range(1, stage_count + 1, 2))
        elif self.kind == "full":
            ids = list(range(1, stage_count + 1))
        elif self.kind == "none":
            ids = []
        elif self.kind == "custom":
            ids = [int(s) for s in self.stages]
        else:
            raise ConfigurationError(f"unknown insertion policy {self.kind!r}")
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate insertion at stages {ids}")
        bad = [s for s in ids if not 1 <= s <= stage_count]
        if bad:
            raise ConfigurationError(f"stages {bad} outside 1..{stage_count}")
        return tuple(sorted(ids))


@dataclass
class Partition:
    frozen: list
    tunable: list

    @property
    def frozen_count(self) -> int:
        return sum(p.size for _, p in self.frozen)

    @property
    def tunable_count(self) -> int:
        return sum(p.size for _, p in self.tunable)

    @property
    def tunable_percent(self) -> float:
        total = self.frozen_count + self.tunable_count
        return 100.0 * self.tunable_count / total if total else 0.0


class ModelAssembly(Module):
    def __init__(self, backbone: ToyBackbone, adapters: dict, cfg: AdapterConfig,
                 policy: InsertionPolicy, seed: int):
        self.backbone = backbone
        self.adapters = adapters
        self.cfg = cfg
        self.policy = policy
        self.seed = seed

    def __call__(self, frames, trace: dict | None = None) -> Tensor:
        return forward_video(self, frames, trace)

    def tunable_parameters(self) -> list[Parameter]:
        return [p for _, p in partition_parameters(self).tunable]


def assemble(backbone: ToyBackbone, policy: InsertionPolicy, cfg: AdapterConfig,
             seed: int = 0) -> ModelAssembly:
    """Insert one adapter after the mixer of every selected stage."""
    adapters = {}
    for s in policy.resolve(backbone.stage_count):
        adapters[s] = D2STAdapter(backbone.channels, backbone.feature_shape, cfg,
                                  SeededRng(derive_seed(seed, s)))
    backbone.set_trainable(False)
    return ModelAssembly(backbone, adapters, cfg, policy, seed)


def forward_video(asm: ModelAssembly, frames, trace: dict | None = None) -> Tensor:
    """Frames ``(..., T, H_img, W_img, 3)`` to per-frame features ``(..., T, C)``."""
    bb = asm.backbone
    x = bb.embed_frames(frames)
    for s, stage in enumerate(bb.stages, start=1):
        x = stage(x)
        adapter = asm.adapters.get(s)
        if adapter is not None:
            sub = {} if trace is not None else None
            x = adapter(x, trace=sub)
            if trace is not None:
                trace[s] = sub
    return x.mean(axis=(-3, -2))


def partition_parameters(asm: ModelAssembly) -> Partition:
    frozen, tunable = [], []
    for name, p in asm.named_parameters():
        (tunable if p.trainable else frozen).append((name, p))
    return Partition(frozen, tunable)


def frozen_snapshot(asm: ModelAssembly) -> dict[str, bytes]:
    return {name: p.data.tobytes() for name, p in partition_parameters(asm).frozen}


def verify_frozen(asm: ModelAssembly, before: dict[str, bytes]) -> bool:
    """True iff every frozen parameter is bitwise identical to the snapshot."""
    now = frozen_snapshot(asm)
    return now.keys() == before.keys() and all(now[k] == before[k] for k in before)


def backbone_digest(backbone: ToyBackbone) -> str:
    h = hashlib.sha256()
    for name, p in backbone.named_parameters():
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(p.data.tobytes())
    return h.hexdigest()
