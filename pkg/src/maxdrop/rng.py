"""Seeded, splittable random streams.

Every stochastic component (weight init, shuffling, augmentation, dropout
masks, MaxDropout rates) draws from an :class:`Rng`. Streams are addressed by
a path of string keys, so ``rng.split("stage1.block0")`` is the same stream no
matter how many other layers drew before it.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "numpy-PCG64/SeedSequence"


def _key_to_int(key: str) -> int:
    return zlib.crc32(key.encode("utf-8"))


class Rng:
    """A PCG64 stream identified by ``(seed, path)``."""

    algorithm = ALGORITHM

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def split(self, key: str) -> "Rng":
        """Independent child stream; does not consume from this stream."""
        return Rng(self.seed, self.path + (_key_to_int(key),))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    # thin wrappers so callers never touch the generator directly

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None, dtype=np.float64):
        return self._gen.random(size, dtype=dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
