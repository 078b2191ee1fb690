"""Deterministic RNG stream derivation from one master seed.

Every consumer of randomness gets its own generator keyed by
``(master_seed, stream_id, *indices)``.  Streams are independent, so
per-client work could run in parallel without sharing RNG state, and two
runs with the same seed consume identical random sequences regardless of
scheduling.
"""

from __future__ import annotations

import numpy as np

STREAM_INIT = 0
STREAM_POOL = 1
STREAM_PARTITION = 2
STREAM_CLIENT_DATA = 3
STREAM_TRAIN = 4
STREAM_TEST = 5


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream addressed by ``key`` under ``master_seed``."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))
