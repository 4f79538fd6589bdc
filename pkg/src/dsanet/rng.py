"""Portable random streams.

Every stream is numpy's Philox-4x64 counter-based generator keyed by
``(seed, label)``, where the label is reduced to 64 bits with BLAKE2b. The
same ``(seed, label)`` gives the same stream on any platform, and streams
with different labels are independent, so parameter init, scene synthesis
and shuffling never share state.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def label_key(*labels) -> int:
    text = "/".join(str(x) for x in labels).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def stream(seed: int, *labels) -> np.random.Generator:
    key = np.array([int(seed) & MASK64, label_key(*labels)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
