"""Seeded random streams.

Every stream is numpy's Philox-4x64 counter-based bit generator keyed by a
64-bit seed.  Draws use numpy ``Generator`` methods: uniforms are 53-bit
doubles, normals use the ziggurat method, bounded integers use Lemire's
rejection method, shuffles are Fisher-Yates.  Child streams are keyed by
:func:`derive_seed`, a BLAKE2b hash of the parent seed and a path of labels,
so a stream's values never depend on how many draws its siblings made.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(*parts) -> int:
    """Hash an arbitrary path of ints/strings into a 64-bit seed."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


class RngStream:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed)
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    @property
    def counter(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self._bitgen.state["state"]["counter"])

    def child(self, *parts) -> "RngStream":
        return RngStream(derive_seed(self.seed, *parts))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        z = self._gen.standard_normal(size)
        if loc == 0.0 and scale == 1.0:
            return z
        return loc + scale * z

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def shuffle(self, items):
        """Return a shuffled copy of ``items`` (list or array)."""
        perm = self._gen.permutation(len(items))
        if isinstance(items, np.ndarray):
            return items[perm]
        return [items[i] for i in perm]
