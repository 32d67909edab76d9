"""Named random streams derived from one 64-bit seed.

Each consumer asks for a stream by name, so adding a new consumer never
shifts the numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return the generator for ``name`` (optionally sub-indexed) under ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(_name_key(name), *map(int, index)))
    return np.random.default_rng(seq)
