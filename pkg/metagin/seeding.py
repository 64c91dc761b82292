"""Seed lineage helpers.

Every random decision is drawn from a generator derived from a master seed
plus a tuple of tags, so any sub-run can be replayed in isolation.
"""
import hashlib
import json

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit hash of (master, *tags)."""
    payload = json.dumps([int(master)] + [str(t) for t in tags], separators=(',', ':'))
    digest = hashlib.sha256(payload.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
