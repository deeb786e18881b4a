"""Deterministic random-stream derivation.

All randomness in the package flows through generators derived from a user
seed plus a fixed integer path, so independent stages (init, pair sampling,
dropout, augmentation, ...) never share or race a stream.
"""

from __future__ import annotations

import numpy as np

# stage tags; values are part of the reproducibility contract, do not reorder
TAG_INIT = 0
TAG_PAIRS = 1
TAG_DROPOUT = 2
TAG_AUGMENT = 3
TAG_SYNTH = 4
TAG_PROJECTION = 5

_MASK64 = (1 << 64) - 1


def rng_stream(seed: int, *path: int) -> np.random.Generator:
    """Generator for (seed, *path); equal arguments give equal streams."""
    entropy = [int(seed) & _MASK64] + [int(p) & _MASK64 for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
