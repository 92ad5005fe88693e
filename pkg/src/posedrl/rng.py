"""Named random substreams derived from one root seed."""

import zlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` (e.g. "actor-0", "eval-2")."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=(key,)))


def substream_seed(root_seed: int, name: str) -> int:
    return int(substream(root_seed, name).integers(0, 2**31 - 1))
