"""Keyed random streams.

Every stochastic routine draws from ``stream(seed, *key)``: a Philox generator
whose state is derived from the root seed and an integer key path.  Streams
for different keys are statistically independent, and the numbers a task
sees do not depend on how tasks are scheduled across workers.
"""

from __future__ import annotations

import numpy as np

# Purpose tags used as the first key component so that independent
# consumers under the same root seed never share a stream.
TRAIN = 1
QUERY = 2
FIDUCIAL = 3
CONC_PIVOT = 4
BOOTSTRAP = 5
MME_COV = 6
BAND = 7
LIMITS = 8
REPLICATE = 9

MAX_SEED = 2**64 - 1


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for ``key`` under ``seed``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *key: int) -> int:
    """A 64-bit seed derived from ``(seed, *key)``, for handing to sub-tasks."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
