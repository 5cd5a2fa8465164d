"""
Named random sub-streams.

All randomness flows from one global seed. Components ask for their own
stream by name (plus integer keys such as an image index), so adding or
reordering work elsewhere never shifts their random numbers.
"""
import zlib
from typing import Union

import numpy as np

Key = Union[str, int]


def _key_entropy(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if int(key) < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def derive_seed(base_seed: int, *keys: Key) -> int:
    """64-bit seed for the sub-stream (base_seed, *keys)."""
    entropy = [int(base_seed)] + [_key_entropy(k) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)
    return int(state[0])


def stream(base_seed: int, *keys: Key) -> np.random.Generator:
    """Generator for the sub-stream (base_seed, *keys)."""
    return np.random.default_rng(derive_seed(base_seed, *keys))
