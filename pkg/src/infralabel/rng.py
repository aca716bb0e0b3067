"""Keyed random streams.

A stream is derived from the scenario seed plus a tuple of keys
(e.g. ``("lidar", "rsu_0", 42)``), so per-sensor / per-frame work gives the
same numbers regardless of the order or process it runs in.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *keys) -> list[int]:
    digest = hashlib.sha256(repr((int(seed),) + tuple(keys)).encode()).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def stream(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stream_key(seed, *keys))))
