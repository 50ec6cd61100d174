"""Named RNG substreams derived from one run seed.

Each consumer (init, shuffle, dropout, ...) gets its own stream keyed by its
name, so adding a consumer never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream_key(name),) + extra))
