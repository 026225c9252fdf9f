"""Deterministic, keyed random streams.

Every source of randomness in the package is a counter-based Philox
generator keyed by (seed, *labels), where labels are small strings or ints.
Derivation goes through sha256 of the repr of the key tuple, so streams are
stable across processes, platforms and PYTHONHASHSEED.
"""

import hashlib

import numpy as np


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Independent generator for the given seed and label path."""
    key = repr((int(seed),) + tuple(labels)).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    entropy = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
