"""Named, splittable random streams.

Every subsystem draws from its own ``numpy.random.Generator`` (PCG64) derived
from one global seed plus a stream name and optional integer path, so that
e.g. the rollout streams of step 17 do not depend on how many Dirichlet draws
step 16 consumed.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *path: int) -> np.random.Generator:
    """Return a generator for ``(seed, name, *path)``; identical inputs give identical streams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name), *map(int, path)))
    return np.random.Generator(np.random.PCG64(ss))


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
