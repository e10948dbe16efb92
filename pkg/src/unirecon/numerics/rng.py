"""Counter-based seeded random streams.

Backed by numpy's Philox bit generator: the key is derived from the seed and
the stream path, so ``SeededRng(7).split(3)[1]`` is the same stream on every
platform and independent of how many numbers its siblings consumed.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np


def _key(seed: int, path: Sequence[int]) -> int:
    h = hashlib.sha256(np.asarray([seed, *path], dtype=np.uint64).tobytes()).digest()
    return int.from_bytes(h[:16], "little")


class SeededRng:
    """A reproducible random stream identified by ``(seed, path)``."""

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        self._gen = np.random.Generator(np.random.Philox(key=_key(self.seed, self.path)))
        self.position = 0  # values drawn so far

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"

    def child(self, *index: int) -> "SeededRng":
        """Deterministic sub-stream; does not advance this stream."""
        return SeededRng(self.seed, self.path + tuple(index))

    def split(self, n: int) -> list["SeededRng"]:
        return [self.child(i) for i in range(n)]

    # -- draws -------------------------------------------------------------
    def _advance(self, shape) -> None:
        self.position += int(np.prod(shape)) if shape is not None else 1

    def normal(self, shape) -> np.ndarray:
        self._advance(shape)
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None):
        self._advance(shape)
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        self._advance(size)
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        self._advance(size)
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        self._advance(n)
        return self._gen.permutation(n)


def sample_gaussian(rng: SeededRng, shape):
    """Standard-normal tensor drawn from ``rng`` (float64 draw, stored in the default dtype)."""
    from .tensor import Tensor

    return Tensor(rng.normal(shape))
