"""Seed derivation tree.

Every random stream is named by a path below the master seed, e.g.
``derive_seed(master, "slide", "test", 2)`` or ``derive_seed(master, "forest", run)``.
String components are hashed with CRC32, integers are used as-is, so a
stream never depends on scheduling, worker count, time or environment.
"""
from __future__ import annotations

import zlib

import numpy as np


def _component(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(master: int, *path) -> int:
    ss = np.random.SeedSequence(int(master) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(_component(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def derive_rng(master: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))
