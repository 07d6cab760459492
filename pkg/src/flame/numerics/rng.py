"""Seedable, splittable random streams.

Every consumer asks for a stream by a tuple of string/int keys; the stream is a
Philox (counter-based) generator keyed by the run seed plus a stable hash of the
keys, so independent modules never share draws and reordering calls in one
module cannot perturb another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_words(keys: tuple) -> list[int]:
    words = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            words.append(int(k) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(k).encode("utf-8")))
    return words


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; identical inputs give identical streams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_words(keys)))
    return np.random.Generator(np.random.Philox(ss))
