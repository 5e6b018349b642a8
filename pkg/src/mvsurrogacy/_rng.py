"""Seed derivation: every random stream is keyed by (seed, purpose, id)."""

from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    digest = hashlib.blake2b(repr(part).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in key))


def stream(seed: int, *key) -> np.random.Generator:
    """Counter-based generator for one (seed, *key) stream."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *key)))


def derive_seed(seed: int, *key) -> int:
    return int(seed_sequence(seed, *key).generate_state(1, np.uint64)[0])
