from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Seeded PCG64 stream. Same seed, same samples, on every platform."""

    algorithm = "PCG64"

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def reset(self, seed: int | None = None) -> None:
        if seed is not None:
            self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, shape=None):
        return self.gen.random(shape)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def spawn(self, key: str) -> "Rng":
        return Rng(derive_seed(self.seed, key))


def derive_seed(seed: int, key: str) -> int:
    """Stable 64-bit seed for (global seed, key), independent of PYTHONHASHSEED."""
    digest = hashlib.sha256(f"{int(seed)}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
