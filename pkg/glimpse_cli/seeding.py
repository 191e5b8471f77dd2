"""Deterministic seed splitting.

All randomness flows from one root seed. Child seeds are derived from the
root and a path of keys with sha256, so they do not depend on Python's hash
randomisation, on worker count or on completion order.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

SeedKey = Union[int, str]

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, *keys: SeedKey) -> int:
    payload = "/".join([str(int(root) & _MASK64)] + [str(key) for key in keys])
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & _MASK64)
