"""Seed derivation for every random draw in the package.

All randomness flows from one root seed through Philox, a counter-based
bit generator. Independent streams are derived by hashing a label path
(e.g. ``("pretrain", step, sample)``) together with the root seed into a
128-bit Philox key, so any consumer can re-derive its stream from
(seed, path) alone without coordinating with other consumers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *path: object) -> int:
    """128-bit Philox key for the stream named by ``path`` under ``seed``."""
    label = "/".join(str(p) for p in path)
    digest = hashlib.sha256(f"{seed}#{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, *path: object) -> np.random.Generator:
    """Independent generator for (seed, path). Same arguments, same draws."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *path)))
