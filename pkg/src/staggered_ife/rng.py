"""Counter-based random streams.

Every stream is a Philox generator keyed on a tuple of integers (a base
seed plus indices such as replication or draw number), so a stream depends
only on its coordinates and never on the order in which streams are
created.  That is what makes parallel and serial runs agree bit for bit.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_entropy(seed) -> list[int]:
    if isinstance(seed, (tuple, list)):
        out = []
        for s in seed:
            out.extend(_as_entropy(s))
        return out
    if isinstance(seed, str):
        return [zlib.crc32(seed.encode("utf-8"))]
    s = int(seed)
    if s < 0:
        raise ValueError("seeds must be non-negative")
    return [s]


def derive_key(seed) -> int:
    """Collapse a seed (int, str, or nested tuple of those) to a 64-bit key."""
    ss = np.random.SeedSequence(_as_entropy(seed))
    return int(ss.generate_state(1, np.uint64)[0])


def stream(key: int, counter: int) -> np.random.Generator:
    """Generator for coordinate ``counter`` under a derived 64-bit ``key``."""
    return np.random.Generator(
        np.random.Philox(key=np.array([key, counter], dtype=np.uint64))
    )


def rng_for(*coords) -> np.random.Generator:
    """Generator for an arbitrary coordinate tuple, e.g. ``rng_for(seed, rep)``."""
    *head, last = coords if coords else (0,)
    return stream(derive_key(tuple(head)), int(last))
