"""Deterministic random-stream derivation.

A run is configured by a single unsigned 64-bit seed.  Every consumer of
randomness derives its own independent stream from that seed plus a string
label, so adding or removing one consumer never disturbs the draws seen by
another.  Derivation is a cryptographic hash, which keeps streams with
related labels (``"batch.0"`` vs ``"batch.1"``) statistically unrelated.
"""

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    """Map (seed, label) to a child seed, stable across runs and platforms."""
    msg = seed.to_bytes(8, "little", signed=False) + label.encode("utf-8")
    digest = hashlib.sha256(msg).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Return an independent generator for the given label."""
    if not 0 <= seed <= SEED_MASK:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(derive_seed(seed, label)))
