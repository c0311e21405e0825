"""Seeding conventions.

Every seeded routine draws from numpy's PCG64 bit generator (PCG XSL RR
128/64), seeded through ``numpy.random.SeedSequence``. Both algorithms are
fixed by numpy's stability policy, so a seed reproduces the same stream on any
platform. Independent sub-streams are keyed by integer tuples, e.g.
``stream(seed, i, j)`` for the CI test on the pair (i, j).
"""

import numpy as np


def make_rng(seed=None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def stream(seed, *keys) -> np.random.Generator:
    entropy = [0 if seed is None else int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
