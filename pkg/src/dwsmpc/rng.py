"""Seeded, splittable random streams; every random draw in the package comes from here."""
from __future__ import annotations

import numpy as np


def generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def derive(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for a (seed, key...) tuple; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])
