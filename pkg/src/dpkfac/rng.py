"""Seedable random streams with documented splitting.

A single 64-bit seed defines one ``Rng``. Sub-streams for independent
consumers (batch sampling, mechanism noise, probe generation, workers) are
derived with ``spawn``/``child``, which go through numpy's ``SeedSequence``
spawning, so distinct children are non-overlapping by construction.
Determinism is guaranteed within one build: same seed, same call order,
same stream.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class Rng:
    def __init__(self, seed, _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))
        self.seed = seed

    def spawn(self, n: int) -> list["Rng"]:
        """n independent child streams, non-overlapping with self and each other."""
        return [Rng(self.seed, _seq=s) for s in self._seq.spawn(n)]

    def child(self, key: int) -> "Rng":
        """Deterministic child stream addressed by a small integer key."""
        if key < 0:
            raise ContractError("child key must be non-negative")
        seq = np.random.SeedSequence(
            entropy=self._seq.entropy,
            spawn_key=tuple(self._seq.spawn_key) + (key,),
        )
        return Rng(self.seed, _seq=seq)

    def standard_normal(self, shape) -> np.ndarray:
        """Standard normal draws, float64."""
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def normal(self, loc, scale, shape) -> np.ndarray:
        return loc + scale * self.standard_normal(shape)

    def uniform_int(self, lo: int, hi: int, size=None) -> np.ndarray:
        """Uniform integers in the half-open range [lo, hi)."""
        if not lo < hi:
            raise ContractError(f"uniform_int requires lo < hi, got [{lo}, {hi})")
        return self._gen.integers(lo, hi, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
