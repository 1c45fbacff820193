"""Derivation of independent, reproducible RNG streams.

Streams are counter-based (Philox) and keyed by (seed, *key), so any
consumer can draw from its own stream regardless of scheduling order.
Key tags are assigned per module to keep streams disjoint.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *key) -> np.random.Generator:
    """Independent Philox stream for (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seed=ss))
