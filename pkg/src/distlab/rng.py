"""Named random sub-streams derived from one top-level seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for stage ``name`` (e.g. "data", "init", "shuffle").

    Keyed by a stable CRC of the name, so adding a stage never perturbs the
    draws of another.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF,
                                                         zlib.crc32(name.encode())]))
