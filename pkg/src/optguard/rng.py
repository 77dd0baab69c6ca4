"""Seeded random streams.

Every stream derives from one 64-bit root seed through ``SeedSequence``
spawn keys, so independent components never share state and adding a new
consumer does not perturb existing ones.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed, *path) -> np.random.Generator:
    """Philox generator for ``seed`` and a path of ints or strings."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
