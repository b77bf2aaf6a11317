"""Seeded randomness.

All draws go through numpy's PCG64 bit generator, whose output stream is
fixed for a given seed across platforms and numpy releases.  Child streams are
derived with ``SeedSequence`` spawn keys so that, for example, the seed for
episode 17 does not depend on how many episodes were drawn before it.
"""
from __future__ import annotations

import numpy as np

from .tensor import get_default_dtype

_U64 = (1 << 64) - 1


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit seed deterministically derived from ``seed`` and integer keys."""
    ss = np.random.SeedSequence(int(seed) & _U64, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class SeededRng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _U64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *keys))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(get_default_dtype(), copy=False)

    def uniform(self, low, high, shape=None) -> np.ndarray:
        return np.asarray(self._gen.uniform(low, high, shape)).astype(get_default_dtype(), copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
