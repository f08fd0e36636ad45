"""Named random substreams derived from one experiment seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *index)``.

    Different names or indices give statistically independent streams, and
    the draw for a given key never depends on how many other keys were used.
    """
    key = (zlib.crc32(name.encode("utf-8")), *(int(i) for i in index))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def sub_seed(seed: int, name: str, *index: int) -> int:
    return int(stream(seed, name, *index).integers(0, 2**31 - 1))
