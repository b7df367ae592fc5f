"""Seeded random streams.

Every stochastic choice in the package draws from a generator derived from
``(seed, *keys)`` so that results depend only on the seed and the position
in the run (epoch, iteration, clip index), never on call history.
"""
from __future__ import annotations

import numpy as np

Rng = np.random.Generator


def make_rng(seed: int, *keys: int) -> Rng:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
