"""Named, counter-based RNG substreams.

Every random decision in an experiment draws from ``stream(seed, name, ...)``
so that, e.g., the client-sampling stream of round 7 is independent of how
many draws the initialization stream consumed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream keys must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    # length prefix: SeedSequence treats trailing zero words as absent
    return np.random.SeedSequence([len(names), _key(seed), *(_key(n) for n in names)])


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *names))
