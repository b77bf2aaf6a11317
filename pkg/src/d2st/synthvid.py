"""Deterministic synthetic videos.

Two class families:

* ``spatial``  - classes differ in shape (and motion); a single frame suffices.
* ``temporal`` - every class shows the same eight keyframes (one shape at
  eight positions of a horizontal track, each with its own brightness); classes
  differ only in the order of the keyframes.  Any model that treats a video as
  an unordered bag of frames is at chance on this family.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .rng import SeededRng, derive_seed

SHAPES = ("disk", "square", "bar")
MOTIONS = ("left", "right", "up", "down", "static", "reorder-A", "reorder-B")
TEMPORAL_MOTIONS = ("left", "right", "reorder-A", "reorder-B")
FAMILIES = ("spatial", "temporal")

_COLORS = {"disk": (0.9, 0.25, 0.2), "square": (0.2, 0.85, 0.3), "bar": (0.25, 0.35, 0.95)}
_BACKGROUND = 0.1


@dataclass(frozen=True)
class SynthClassSpec:
    family: str
    shape_id: str = "disk"
    motion_id: str = "static"
    noise_sigma: float = 0.05
    # selects the keyframe permutation of reorder-A / reorder-B classes
    variant: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.shape_id not in SHAPES:
            raise ConfigurationError(f"unknown shape {self.shape_id!r}")
        if self.motion_id not in MOTIONS:
            raise ConfigurationError(f"unknown motion {self.motion_id!r}")
        if self.family == "temporal" and self.motion_id not in TEMPORAL_MOTIONS:
            raise ConfigurationError(f"motion {self.motion_id!r} has no temporal-family ordering")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")


@dataclass
class VideoSample:
    frames: np.ndarray
    label: int
    seed: int


def _mask(shape_id: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape_id == "disk":
        return dy * dy + dx * dx <= radius * radius
    if shape_id == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= radius * 0.85
    return (np.abs(dx) <= radius * 0.45) & (np.abs(dy) <= radius * 1.4)


def _paint(size: int, shape_id: str, cy: float, cx: float, radius: float, gain: float) -> np.ndarray:
    img = np.full((size, size, 3), _BACKGROUND)
    img[_mask(shape_id, size, cy, cx, radius)] = np.asarray(_COLORS[shape_id]) * gain
    return img


def keyframe_order(motion_id: str, variant: int, frames: int) -> np.ndarray:
    """Order in which the shared temporal-family keyframes are shown."""
    if motion_id == "right":
        return np.arange(frames)
    if motion_id == "left":
        return np.arange(frames)[::-1].copy()
    perm = SeededRng(derive_seed(0x5EED, variant)).permutation(frames)
    return perm if motion_id == "reorder-A" else perm[::-1].copy()


@functools.lru_cache(maxsize=64)
def _keyframes(shape_id: str, frames: int, size: int) -> np.ndarray:
    radius = size / 8.0
    xs = np.linspace(radius + 1.0, size - radius - 1.0, frames)
    gains = np.linspace(0.35, 1.0, frames)
    keys = np.stack([_paint(size, shape_id, size / 2.0, x, radius, g) for x, g in zip(xs, gains)])
    keys.flags.writeable = False
    return keys


def _temporal_keyframes(spec: SynthClassSpec, frames: int, size: int) -> np.ndarray:
    return _keyframes(spec.shape_id, frames, size)


def _spatial_frames(spec: SynthClassSpec, rng: SeededRng, frames: int, size: int) -> np.ndarray:
    radius = size / 8.0
    step = 1.5
    travel = step * (frames - 1)
    lo, hi = radius + 1.0, size - radius - 1.0
    cy, cx = rng.uniform(lo + travel / 2, hi - travel / 2, 2) if hi - lo > travel else (size / 2, size / 2)
    dy, dx = {"left": (0, -step), "right": (0, step), "up": (-step, 0), "down": (step, 0),
              "static": (0, 0)}.get(spec.motion_id, (0, 0))
    t0 = (frames - 1) / 2.0
    return np.stack([_paint(size, spec.shape_id, cy + dy * (t - t0), cx + dx * (t - t0), radius, 1.0)
                     for t in range(frames)])


def render_video(spec: SynthClassSpec, rng: SeededRng, label: int = -1,
                 frames: int = 8, size: int = 32) -> VideoSample:
    """Render one ``(frames, size, size, 3)`` clip with pixel values in [0, 1]."""
    if spec.family == "temporal":
        keys = _temporal_keyframes(spec, frames, size)
        clip = keys[keyframe_order(spec.motion_id, spec.variant, frames)]
    else:
        clip = _spatial_frames(spec, rng, frames, size)
    if spec.noise_sigma > 0:
        clip = clip + rng.normal(clip.shape, spec.noise_sigma)
    return VideoSample(np.clip(clip, 0.0, 1.0), label, rng.seed)


def spatial_pool(noise_sigma: float = 0.05) -> list[SynthClassSpec]:
    return [SynthClassSpec("spatial", s, m, noise_sigma)
            for s in SHAPES for m in ("left", "right", "up", "down", "static")]


def temporal_pool(noise_sigma: float = 0.05, variants=range(4), shape_id: str = "disk") -> list[SynthClassSpec]:
    pool = [SynthClassSpec("temporal", shape_id, "right", noise_sigma),
            SynthClassSpec("temporal", shape_id, "left", noise_sigma)]
    for v in variants:
        pool.append(SynthClassSpec("temporal", shape_id, "reorder-A", noise_sigma, v))
        pool.append(SynthClassSpec("temporal", shape_id, "reorder-B", noise_sigma, v))
    return pool


@dataclass
class Episode:
    way: int
    shot: int
    queries: int
    support: np.ndarray           # (N*K, T, H, W, 3), class-major
    support_labels: np.ndarray    # (N*K,)
    query: np.ndarray             # (N*Q, T, H, W, 3)
    query_labels: np.ndarray      # (N*Q,)
    classes: list = field(default_factory=list)
    support_seeds: list = field(default_factory=list)
    query_seeds: list = field(default_factory=list)


def sample_episode(class_pool, N: int, K: int, Q: int, rng: SeededRng,
                   frames: int = 8, size: int = 32) -> Episode:
    """Draw N distinct classes and K support plus Q query clips for each."""
    if len(class_pool) < N:
        raise ConfigurationError(f"class pool of {len(class_pool)} cannot supply {N} ways")
    if N < 1 or K < 1 or Q < 0:
        raise ConfigurationError(f"invalid episode shape N={N} K={K} Q={Q}")
    picks = [int(i) for i in rng.choice(len(class_pool), N)]
    support, query, s_seeds, q_seeds = [], [], [], []
    for label, idx in enumerate(picks):
        spec = class_pool[idx]
        for j in range(K + Q):
            vid = render_video(spec, rng.child(label, j), label, frames, size)
            (support if j < K else query).append(vid.frames)
            (s_seeds if j < K else q_seeds).append(vid.seed)
    if set(s_seeds) & set(q_seeds):
        raise AssertionError("support and query seeds collided")
    empty = np.zeros((0, frames, size, size, 3))
    return Episode(N, K, Q, np.stack(support), np.repeat(np.arange(N), K),
                   np.stack(query) if query else empty, np.repeat(np.arange(N), Q),
                   picks, s_seeds, q_seeds)


class EpisodeSampler:
    """Episode ``i`` depends only on ``(seed, i)``."""

    def __init__(self, class_pool, N: int = 5, K: int = 1, Q: int = 5, seed: int = 0,
                 frames: int = 8, size: int = 32):
        self.class_pool = list(class_pool)
        self.N, self.K, self.Q = N, K, Q
        self.seed = seed
        self.frames, self.size = frames, size

    def episode(self, i: int) -> Episode:
        return sample_episode(self.class_pool, self.N, self.K, self.Q,
                              SeededRng(derive_seed(self.seed, i)), self.frames, self.size)

    def __iter__(self):
        i = 0
        while True:
            yield self.episode(i)
            i += 1


def export_episodes(sampler: EpisodeSampler, count: int, out_dir) -> Path:
    """Write ``count`` episodes as ``.npy`` tensors plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        ep = sampler.episode(i)
        np.save(out / f"episode_{i:05d}_support.npy", ep.support)
        np.save(out / f"episode_{i:05d}_query.npy", ep.query)
        entries.append({
            "index": i,
            "support": f"episode_{i:05d}_support.npy",
            "query": f"episode_{i:05d}_query.npy",
            "classes": [vars(sampler.class_pool[c]) for c in ep.classes],
            "support_labels": ep.support_labels.tolist(),
            "query_labels": ep.query_labels.tolist(),
            "support_seeds": [str(s) for s in ep.support_seeds],
            "query_seeds": [str(s) for s in ep.query_seeds],
        })
    manifest = {"seed": str(sampler.seed), "way": sampler.N, "shot": sampler.K,
                "queries": sampler.Q, "frames": sampler.frames, "size": sampler.size,
                "episodes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out
