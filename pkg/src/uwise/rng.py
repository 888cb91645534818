"""Named, splittable random streams derived from one 64-bit seed.

Every consumer asks for its own stream by a path of names/integers, e.g.
``stream(seed, "optimize", "eps", lr_index)``. Streams are Philox
(counter-based) generators keyed through :class:`numpy.random.SeedSequence`,
so results do not depend on call order, thread count or platform.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "spawn_key"]

_MASK64 = (1 << 64) - 1


def _part(p) -> int:
    if isinstance(p, (bool, np.bool_)):
        raise TypeError("stream path entries must be str or int")
    if isinstance(p, (int, np.integer)):
        if p < 0:
            raise ValueError("stream path integers must be non-negative")
        return int(p)
    if isinstance(p, str):
        # high bit separates string tags from small integers
        return (1 << 32) | zlib.crc32(p.encode("utf-8"))
    raise TypeError(f"bad stream path entry {p!r}")


def spawn_key(*path) -> tuple[int, ...]:
    return tuple(_part(p) for p in path)


def stream(seed: int, *path) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``."""
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise TypeError("seed must be an integer")
    if not 0 <= seed <= _MASK64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    ss = np.random.SeedSequence(int(seed), spawn_key=spawn_key(*path))
    return np.random.Generator(np.random.Philox(ss))
