"""Named random substreams derived from one top-level seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "assignment", "batching", "split", "cluster", "model")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name``; stable across runs and platforms."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
