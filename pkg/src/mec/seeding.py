"""Deterministic RNG derivation.

Every random stage of a run (init, shuffling, sampling, ...) pulls its own
`numpy` generator derived from the single top-level seed plus a stable label.
Labels are hashed with blake2b rather than Python's `hash()`, which is salted
per process and would wreck cross-run reproducibility.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *labels: str) -> int:
    """Map (seed, label path) to a stable 64-bit integer."""
    key = "/".join([str(int(seed))] + list(labels)).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(seed: int, *labels: str) -> np.random.Generator:
    """Independent generator for one named stage of a run."""
    return np.random.default_rng(derive_seed(seed, *labels))
