"""Seed derivation.

Every random stream is a pure function of ``(root seed, purpose tag, *keys)``,
so results never depend on execution order or on how many workers run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, tag: str, *keys: int) -> int:
    h = hashlib.sha256()
    h.update(int(root).to_bytes(32, "little", signed=True))
    h.update(tag.encode("utf-8"))
    for k in keys:
        h.update(b"\x00")
        h.update(int(k).to_bytes(32, "little", signed=True))
    return int.from_bytes(h.digest()[:16], "little")


def child_rng(root: int, tag: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, tag, *keys))
