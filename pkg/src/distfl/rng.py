"""Counter-based random streams keyed by (seed, purpose, ids...)."""

import zlib

import numpy as np


def _code(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    part = int(part)
    if part < 0:
        raise ValueError("stream ids must be nonnegative")
    return part


def stream(seed: int, *key) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *key)``.

    The same key always yields the same sequence, no matter how many other
    streams were drawn before it.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_code(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
