"""Named, seedable, counter-based random streams.

Every consumer of randomness (parameter init, condition permutation, forest
sampling, dropout, shuffling) gets its own stream, keyed by a (seed, name)
pair hashed into a Philox key. Streams with different names are independent,
so toggling one consumer on or off never shifts the draws another one sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngStream:
    """One independent Philox stream derived from (seed, name)."""

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = name
        digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "RngStream":
        """Split off an independent stream; same (seed, path) -> same draws."""
        return RngStream(self.seed, f"{self.name}/{name}")

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from range({n})")
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, name={self.name!r})"
