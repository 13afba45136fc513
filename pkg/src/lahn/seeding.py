"""Named deterministic RNG sub-streams derived from a single root seed.

Every source of randomness in a run (data generation, batch shuffling, the
two dropout streams) draws from its own generator so that components stay
independently reproducible: changing how often one stream is consumed never
perturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np

# Canonical stream names used by the trainer and data pipeline.
STREAM_DATA = "data"
STREAM_SHUFFLE = "shuffle"
STREAM_DROPOUT_MAIN = "dropout-main"
STREAM_DROPOUT_MOMENTUM = "dropout-momentum"
STREAM_INIT = "init"


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for the given (root seed, stream name) pair.

    The mapping is stable across runs and platforms: the stream name is
    folded into the seed material via crc32, not Python's salted hash().
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), tag])))
