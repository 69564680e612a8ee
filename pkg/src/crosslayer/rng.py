"""Seed derivation.

All randomness in the package flows through `rng_for`: a root seed plus a
tuple of string/int tags deterministically names one PCG64 stream.  Tags are
hashed into SeedSequence entropy words, so the same (seed, tags) pair gives
the same stream on every platform and under any worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["rng_for", "spawn_key"]


def spawn_key(*tags) -> tuple[int, ...]:
    """Map arbitrary tags to a stable tuple of 32-bit entropy words."""
    words = []
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            words.append(int(tag) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(tag).encode()).digest()
            words.append(int.from_bytes(digest[:4], "little"))
    return tuple(words)


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Deterministic generator for (seed, tags)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key(*tags))
    return np.random.default_rng(seq)
