"""Deterministic, label-keyed random streams.

Every consumer of randomness asks for a stream by a path of labels, e.g.
``derive(seed, "replica", 7, "env")``.  Streams with different paths are
statistically independent and a stream's draws never depend on how much
another stream was consumed, which is what the coupling constructions need.
"""

from __future__ import annotations

import zlib

import numpy as np

SeedLike = int | np.random.SeedSequence


def _key(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode())
    if label < 0:
        raise ValueError("integer stream keys must be nonnegative")
    return int(label)


def derive(seed: SeedLike, *labels: int | str) -> np.random.SeedSequence:
    """Child seed sequence addressed by ``labels`` below ``seed``."""
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return np.random.SeedSequence(
        entropy=base.entropy,
        spawn_key=tuple(base.spawn_key) + tuple(_key(lb) for lb in labels),
    )


def stream(seed: SeedLike, *labels: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive(seed, *labels)))
