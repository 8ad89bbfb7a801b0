"""Keyed random streams.

Every random draw in the simulator comes from a generator keyed by a
master seed plus a tuple of integers naming the consumer (purpose tag,
unit, agent, round).  Streams never depend on call order, so results
do not change with the number of worker threads.
"""

from __future__ import annotations

import numpy as np

# purpose tags; values are part of the reproducibility contract
DATA = 1
PARTICIPANTS = 2
BATCHES = 3
LINK_NOISE = 4
DH_SECRET = 5
SCHEDULE = 6
SWEEP = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed derived from ``(seed, *key)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def counter_stream(key: int, counter: int) -> np.random.Generator:
    """Philox generator keyed by ``key`` and started at block ``counter``.

    Used for the pairwise mask PRG: the key is the shared secret of a pair
    of agents and the counter is the round index.
    """
    key = int(key) & ((1 << 128) - 1)
    ctr = np.array([0, 0, int(counter) & ((1 << 64) - 1), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=ctr))
