"""Deterministic derivation of independent random sub-streams.

All randomness in the package flows through numpy's SeedSequence machinery.
A stream is identified by a base seed plus a tuple of keys (stage names,
dataset indices, restart indices); the same keys always yield the same
stream regardless of process, thread, or execution order.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    if isinstance(key, str):
        # crc32 is stable across processes, unlike the builtin hash()
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"stream key must be int or str, got {type(key).__name__}")


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    entropy = [int(seed) & _MASK64] + [_key_to_int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def substream(seed: int, *keys) -> np.random.Generator:
    """A Generator deterministically derived from seed and keys."""
    return np.random.default_rng(seed_sequence(seed, *keys))


def derive_seed(seed: int, *keys) -> int:
    """Collapse (seed, keys) to a single 64-bit seed for nested configs."""
    return int(seed_sequence(seed, *keys).generate_state(1, np.uint64)[0])
