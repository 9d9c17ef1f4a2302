"""Named random streams derived from one master seed.

Every consumer asks for a stream by a key path, e.g. ``stream(seed, "noise",
branch, tensor_index)``. Streams are independent of the order in which they
are requested, so parallel evaluation cannot change any draw.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def stream_id(*key) -> str:
    return "/".join(str(k) for k in key)
