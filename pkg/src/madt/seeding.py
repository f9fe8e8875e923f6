"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "data", "init", "rollout")."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=(zlib.crc32(name.encode()),)))


def subseed(root_seed: int, name: str) -> int:
    return int(substream(root_seed, name).integers(0, 2**31 - 1))
