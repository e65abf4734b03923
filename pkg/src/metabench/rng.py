"""Hierarchical deterministic random streams.

Every random draw in the project comes from an RngStream keyed by a master
seed plus a tuple of key parts (phase names, purpose tags, task indices).
Distinct keys give statistically independent PCG64 generators; the same
(seed, key) pair always reproduces the same sequence, which is what makes
episodes replayable and runs bit-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 63) - 1


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") & _MASK
    raise TypeError(f"stream key parts must be int or str, got {type(part).__name__}")


class RngStream:
    """A master seed plus a key prefix; children extend the prefix."""

    __slots__ = ("master_seed", "key")

    def __init__(self, master_seed: int, key: tuple = ()):
        self.master_seed = int(master_seed)
        self.key = tuple(key)

    def child(self, *parts) -> "RngStream":
        return RngStream(self.master_seed, self.key + parts)

    def generator(self, *parts) -> np.random.Generator:
        """Fresh generator for this stream's key extended by ``parts``."""
        entropy = [self.master_seed & _MASK]
        entropy.extend(_encode(p) for p in self.key + parts)
        return np.random.default_rng(np.random.SeedSequence(entropy))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, key={self.key!r})"
