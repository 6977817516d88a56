"""Counter-based random streams keyed by (seed, stream id)."""

from __future__ import annotations

import numpy as np


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent Philox generator for ``stream_id`` under ``seed``.

    Streams are spawned through ``SeedSequence(seed, spawn_key=(stream_id,))``
    so any stream can be rebuilt without generating the others.
    """
    if seed < 0 or stream_id < 0:
        raise ValueError("seed and stream id must be nonnegative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))
