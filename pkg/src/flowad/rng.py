"""Seeded, splittable random streams.

Built on numpy's counter-based Philox generator so that (seed, path) fully
determines the stream: two runs with the same seed and the same call sequence
produce bit-identical output, and child streams are independent of how much
the parent has already drawn.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """One deterministic stream; `child(i)` splits off an independent one."""

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence([self.seed, *self.path])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *path):
        return Rng(self.seed, self.path + tuple(path))

    def normal(self, shape=(), scale=1.0):
        return self._gen.standard_normal(shape) * scale

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=()):
        return self._gen.integers(low, high, shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
