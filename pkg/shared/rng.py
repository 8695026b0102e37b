"""
Named random sub-streams.

Every stochastic step draws from a generator derived from the master seed and a
tuple of names, e.g. ``stream(seed, "channel", "image", 3)``. Names map to 32-bit
spawn keys via the first four bytes (little-endian) of their SHA-256 digest, so the
stream for a given path never depends on which other streams were created first.
"""

import hashlib

import numpy as np


def name_key(name: str | int) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(master_seed: int, *names: str | int) -> np.random.SeedSequence:
    if master_seed < 0:
        raise ValueError("master seed must be non-negative")
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(name_key(n) for n in names))


def stream(master_seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the sub-stream ``names`` of ``master_seed``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *names)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` (used for shuffle seeds and nested streams)."""
    return int(rng.integers(0, 2**63 - 1))
