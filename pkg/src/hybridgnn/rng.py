"""Named random-number streams derived from a single root seed.

Every consumer of randomness (weight init, shuffling, synthetic data, fold
subseeds) pulls its own generator via `substream`, so adding or removing one
consumer never perturbs the draws seen by the others.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed: int, *names: str) -> np.random.Generator:
    """Return a generator for the stream identified by `names` under `seed`."""
    key = tuple(_name_key(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def subseed(seed: int, *names: str) -> int:
    """Derive a 63-bit integer seed for the named stream (for nested splitting)."""
    key = tuple(_name_key(n) for n in names)
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0] >> 1)
