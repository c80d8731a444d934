"""Hierarchical seed derivation.

Every source of randomness in a run (dataset synthesis, train/test split,
weight init, batch order, exemplar selection) draws from its own named
stream under one root seed, so paired runs that share a seed differ only
where they are meant to.
"""

import numpy as np

DATA, SPLIT, INIT, BATCH, SELECT = range(5)


def rng_for(seed, *path):
    """Independent generator for (seed, *path); same arguments, same stream."""
    key = tuple(int(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
