"""Deterministic randomness utilities.

Every stochastic part of the package (shuffling, parameter init, dropout,
negative subsampling) draws from its own named stream derived from a single
64-bit seed, so turning one feature on or off never perturbs the others.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for (seed, name).

    The same pair always yields the same stream; distinct names yield
    streams that do not interfere with each other.
    """
    return np.random.default_rng(np.random.SeedSequence((seed & _MASK64, fnv1a_64(name.encode("utf-8")))))
