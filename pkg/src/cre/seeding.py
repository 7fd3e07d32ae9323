"""Deterministic RNG derivation.

Every random draw in the library comes from a generator derived here, keyed
by the global seed plus integer tags (epoch, image index, purpose, ...).
Streams are pure functions of their key, so training can be resumed at any
step and replay the exact randomness of an uninterrupted run.
"""

from __future__ import annotations

import numpy as np

# Purpose tags keeping unrelated streams apart.
ORDER = 1
AUGMENT = 2
MASK = 3
INIT = 4
SPLIT = 5
PROBE = 6
FINETUNE = 7
CORPUS = 8


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for stream ``key`` under ``seed``; same key, same stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key: int) -> int:
    """Fold ``(seed, key)`` into a single 64-bit integer seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    lo, hi = ss.generate_state(2, dtype=np.uint64)[:2]
    return int(lo ^ (hi << np.uint64(1))) & (2**63 - 1)
