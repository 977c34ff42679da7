"""Keyed counter-based random streams.

A stream is addressed by ``(seed, *keys)``; keys may be ints or short string
tags.  Streams never share state, so drawing from one cannot shift another,
and parallel or reordered consumers see identical values.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError(f"stream keys must be non-negative, got {k}")
    return k


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent Philox generator for the given key path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
