"""Keyed, reproducible random generators.

Every random draw in the package comes from a generator derived from an
integer seed plus a tuple of string/int keys, so independent components
never share generator state and the same (seed, keys) always replays.
"""
import hashlib

import numpy as np


def _key_words(keys):
    words = []
    for key in keys:
        digest = hashlib.sha256(str(key).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return words


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Return a fresh generator for ``seed`` specialised by ``keys``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_key_words(keys)]))
