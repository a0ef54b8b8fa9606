"""Deterministic random streams.

Every stochastic choice in the package draws from a generator keyed by
(master seed, stream id, *indices).  Streams are independent of each other
and of execution history, so toggling one feature never perturbs another's
draws, and training can resume mid-run and reproduce the exact tail of an
uninterrupted run.
"""

import numpy as np

STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_SAMPLES = 2
STREAM_CLUSTER = 3
STREAM_NEGATIVES = 4
STREAM_LABELS = 5
STREAM_SCENE = 6
STREAM_RENDER = 7


def stream_rng(seed, stream, *key):
    """Generator for `stream` under `seed`, sub-keyed by integers `key`."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),) + tuple(int(k) for k in key))
    return np.random.default_rng(ss)
