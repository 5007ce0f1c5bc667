"""Deterministic RNG stream derivation.

Every source of randomness in the package is a PCG64 generator derived
from a user seed plus a structural tag (purpose string and integer
coordinates such as round and client id). Identical (seed, tags) always
yield identical streams, independent of call order and scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_code(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag & 0xFFFFFFFF
    return zlib.crc32(tag.encode("utf-8"))


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Return a generator keyed by (seed, tags)."""
    entropy = [seed & 0xFFFFFFFFFFFFFFFF] + [_tag_code(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *tags: str | int) -> int:
    """Return a 63-bit child seed keyed by (seed, tags)."""
    entropy = [seed & 0xFFFFFFFFFFFFFFFF] + [_tag_code(t) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> 1)
