"""
Counter-based random streams keyed by (master seed, replica id, stream).

Philox is a counter-based generator, so every key gives an independent,
reproducible stream regardless of how replicas are scheduled on workers.
"""

import numpy as np

STREAM_INITIAL = 0
STREAM_DYNAMICS = 1


def replica_rng(seed: int, replica: int = 0, stream: int = STREAM_DYNAMICS) -> np.random.Generator:
    if seed < 0 or replica < 0 or stream < 0:
        raise ValueError("seed, replica and stream must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replica), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def replica_rngs(seed: int, replicas: int, stream: int = STREAM_DYNAMICS) -> list[np.random.Generator]:
    return [replica_rng(seed, r, stream) for r in range(replicas)]
