"""
Counter-based random substreams.

Every consumer derives its own numpy Generator from the master seed and a
tuple key, so results do not depend on the order or thread in which streams
are used.
"""

import numpy as np


# First element of every spawn key, one per consumer.
DRAWS = 1
BOOTSTRAP = 2
SIM_ITERATION = 3
DESIGN = 4
SIM2_ITERATION = 5


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent Generator for (seed, key)."""
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    )


def derive_seed(seed: int, *key: int) -> int:
    """A 64-bit child seed, for handing a seed on to a nested component."""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(state.generate_state(1, dtype=np.uint64)[0])


def standard_normal_block(
    rng: np.random.Generator,
    replicates: int,
    m: int,
    antithetic: bool = False,
) -> np.ndarray:
    """
    Standard normal pairs for ``replicates`` consecutive replicates, shape
    (replicates, m, 2).

    With ``antithetic`` replicate 2k+1 is the negation of replicate 2k; only the
    even replicates consume the stream. Callers must start every block on an
    even replicate index.
    """
    if not antithetic:
        return rng.standard_normal((replicates, m, 2))
    half = rng.standard_normal(((replicates + 1) // 2, m, 2))
    out = np.empty((replicates, m, 2))
    out[0::2] = half
    out[1::2] = -half[: replicates // 2]
    return out
