"""Named random substreams derived from a single integer seed.

Every consumer of randomness asks for a stream by name, e.g.
``substream(seed, "augment/epoch=3/scene=12")``.  Streams with different
names are statistically independent, so switching one feature on or off
never shifts the draws seen by another.
"""

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str) -> np.random.Generator:
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _name_key(name)])
    return np.random.Generator(np.random.PCG64(seq))


def as_generator(rng) -> np.random.Generator:
    """Accept ``None``, an int seed or a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))
