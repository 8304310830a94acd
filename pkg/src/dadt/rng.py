"""Seed derivation.

Every random stream in the package is seeded from an explicit integer via
``mix64``, the SplitMix64 finalizer applied to ``seed + (index + 1) * GOLDEN``
modulo 2**64::

    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
    z =  z ^ (z >> 31)
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(seed: int, index: int) -> int:
    z = (int(seed) + (int(index) + 1) * GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def generator(seed: int, index: int = 0) -> np.random.Generator:
    """A numpy PCG64 generator seeded with ``mix64(seed, index)``."""
    return np.random.default_rng(mix64(seed, index))
