"""Seeded random streams.

All randomness goes through Philox, a counter-based generator, so every run is
reproducible from its integer seed.
"""

import numpy as np


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def sub_seed(master: int, *key: int) -> int:
    """Deterministic child seed for a (config, replicate, ...) coordinate."""
    seq = np.random.SeedSequence(entropy=master, spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))
