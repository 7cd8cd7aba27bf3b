"""Named seed derivation: every random stream is ``(root seed, label, index...)``."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, label: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode()), *map(int, index)])


def derive_rng(seed: int, label: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label, *index))
