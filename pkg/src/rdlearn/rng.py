"""Seeded random streams.

Every stochastic step draws from numpy's PCG64 generator seeded through a
``SeedSequence`` built from the run seed plus a tuple of integer/string keys.
PCG64 output is identical across platforms, so splits, initialisation,
dropout masks, pair samples and bootstrap draws can all be replayed.
"""

from __future__ import annotations

import zlib

import numpy as np

GENERATOR_NAME = "numpy.random.PCG64 via SeedSequence(entropy=[seed, *keys])"


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError("stream keys must be nonnegative")
    return key


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed derived from ``(seed, *keys)``."""
    return int(substream(seed, *keys).integers(0, 2**63 - 1))
