#!/usr/bin/env python3
"""
Keyed random streams
A stream is a pure function of (root seed, key), so sampling results do not
depend on the order or the worker in which tree nodes are expanded.
"""

import numpy as np

# key slot used for rollout streams, kept apart from branch levels 1..h
LEAF_LEVEL = 0


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for `key` under the root `seed`"""
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))
