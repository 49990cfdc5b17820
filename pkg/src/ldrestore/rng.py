"""Seedable, splittable random streams.

Every source of randomness in the package derives from one integer seed
through named streams, optionally indexed by counters (step, item, ...).
Streams are stateless functions of (seed, name, indices), so a run can be
resumed from any step without replaying earlier draws.
"""

import zlib

import numpy as np


def _tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngHub:
    """Root of all random streams for one experiment seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str, *indices: int) -> np.random.Generator:
        """Fresh generator for the given stream name and counter indices."""
        entropy = [_tag(name), self.seed & 0xFFFFFFFFFFFFFFFF]
        entropy.extend(int(i) & 0xFFFFFFFFFFFFFFFF for i in indices)
        return np.random.default_rng(entropy)


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Shorthand for RngHub(seed).stream(name, *indices)."""
    return RngHub(seed).stream(name, *indices)
