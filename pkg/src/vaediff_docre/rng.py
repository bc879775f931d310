"""Named random streams derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit seed from ``seed`` and a path of labels."""
    key = ":".join([str(int(seed))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def derive_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
