"""Deterministic RNG streams keyed by (seed, label).

Every random draw in the pipeline goes through a named stream so that results
are independent of worker count and scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, stream: str) -> int:
    """64-bit child seed derived from (seed, label) via SHA-256.

    Stable across runs, platforms, and Python versions (no use of hash()).
    """
    digest = hashlib.sha256(f"{seed & _MASK64}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def split_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent, reproducible generator for the given (seed, label) pair."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, stream)))
