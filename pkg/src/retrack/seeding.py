"""Deterministic RNG derivation: one root seed, documented sub-streams.

Every random draw in the package comes from
``rng(root_seed, *tags)`` = ``default_rng(SeedSequence([root_seed, *tags]))``.
The tag vocabulary below is the whole scheme; a given (seed, tags) pair
always yields the same stream, independent of call order, platform, or
how many other streams exist.

Stream layout:

* ``(seed, MAPS)``                      — dataset projection maps
* ``(seed, split_tag, sample_id)``      — one triplet's latents then noise
* ``(seed, HARD, split_tag, i, j)``     — j-th hard negative of query i
* ``(seed, EASY, split_tag, i, j)``     — j-th easy (global) negative
* ``(seed, INIT)``                      — model parameter init
* ``(seed, EPOCH, e)``                  — training permutation of epoch e
* ``(seed, GRADCHECK, k)``              — synthetic gradcheck batch k
"""

from __future__ import annotations

import numpy as np

MAPS = 0
TRAIN = 1
VAL = 2
TEST = 3
HARD = 4
EASY = 5
INIT = 6
EPOCH = 7
GRADCHECK = 8

SPLIT_TAGS = {"train": TRAIN, "val": VAL, "test": TEST}


def rng(seed: int, *tags: int) -> np.random.Generator:
    """The deterministic generator for one (seed, purpose) stream."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))
