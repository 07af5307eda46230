"""Named random streams derived from one 64-bit seed."""

import numpy as np

STREAMS = {"data": 0, "init": 1, "train": 2, "sample": 3, "mask": 4, "metrics": 5, "guide": 6}


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``name`` (and optional worker/fold indices)."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *index)))
