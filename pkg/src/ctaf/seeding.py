"""Deterministic random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def seed_sequence(root: int, purpose: str, *indices: int) -> np.random.SeedSequence:
    """Stable child stream keyed by (root, crc32(purpose), indices)."""
    key = (zlib.crc32(purpose.encode()), *(int(i) for i in indices))
    return np.random.SeedSequence(int(root), spawn_key=key)


def derive_rng(root: int, purpose: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, purpose, *indices))


def derive_seed(root: int, purpose: str, *indices: int) -> int:
    return int(seed_sequence(root, purpose, *indices).generate_state(1)[0])
