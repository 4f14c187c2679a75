"""Named random sub-streams derived from one master seed.

Each stage pulls its generator from ``stream(master, "generation", region_index)``
and friends, so stages are decoupled and per-region work gives the same
numbers whether it runs sequentially or in parallel.
"""

from __future__ import annotations

import zlib

import numpy as np


def _code(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(master: int, *path: str | int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_code(p) for p in path))


def stream(master: int, *path: str | int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *path)))


def derive_seed(master: int, *path: str | int) -> int:
    """A plain integer seed for a sub-stream (for configs and reports)."""
    return int(seed_sequence(master, *path).generate_state(1, dtype=np.uint32)[0])
