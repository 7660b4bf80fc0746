"""Seeded random streams.

Every stream is a numpy ``PCG64`` generator whose ``SeedSequence`` entropy is
``(seed, *keys)``. PCG64 and numpy's sampling routines are platform independent,
so a given (seed, keys) pair always yields the same numbers. String keys are
mapped to integers with CRC32.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError(f"stream keys must be non-negative, got {k}")
    return k


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return an independent generator for the stream ``(seed, *keys)``."""
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
