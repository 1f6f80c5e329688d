"""Deterministic RNG derivation.

Every stochastic step derives its generator from (seed, purpose, extras)
via a stable hash, so runs reproduce exactly regardless of draw order
elsewhere in the process and independent streams never alias.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *parts) -> int:
    """64-bit child seed keyed by the seed and any hashable context parts."""
    tag = ":".join([str(int(seed))] + [str(p) for p in parts])
    digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Generator keyed by the seed and any hashable context parts."""
    return np.random.default_rng(derive_seed(seed, *parts))
