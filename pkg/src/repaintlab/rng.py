"""Named, reproducible random sub-streams.

Every component derives its randomness from one user-visible seed through a
named sub-stream, so any stage of the pipeline can be replayed in isolation.
Names are hashed with crc32 (stable across runs and platforms).
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
