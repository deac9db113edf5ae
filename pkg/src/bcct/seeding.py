"""Deterministic RNG derivation: every stream is a pure function of the run
seed plus a purpose tag, so stages can be reordered without stealing each
other's draws."""

from __future__ import annotations

import zlib

import numpy as np


def spawn_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), zlib.crc32(tag.encode("utf-8")))))
