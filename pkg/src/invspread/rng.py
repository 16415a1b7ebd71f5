"""Seeded random streams.

Every stream is a numpy ``Generator`` over the PCG64 bit generator, keyed by a
tuple of non-negative integers through ``SeedSequence``. Keys play the role of a
hash: ``stream(master_seed, epoch, instance_id, branch)`` always yields the same
numbers, independent of the order in which other streams are created.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def tag(name: str) -> int:
    """Stable integer for a string label, used to separate stream domains."""
    return zlib.crc32(name.encode("utf-8"))


def stream(*keys: int | str) -> np.random.Generator:
    entropy = [tag(k) if isinstance(k, str) else int(k) & MASK64 for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(*keys: int | str) -> int:
    """A 64-bit seed drawn from the stream named by ``keys``."""
    return int(stream(*keys).integers(0, 1 << 63, dtype=np.int64))
