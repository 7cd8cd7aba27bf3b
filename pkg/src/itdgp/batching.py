"""Per-epoch balanced batches for imbalanced binary labels.

Each batch is the whole minority class plus an equal number of majority-class
indices. The majority class is shuffled once per epoch and cut into
``B = floor(V / V_S)`` consecutive chunks of ``V_S``; because ``B * V_S`` can
exceed ``V_L``, chunks that run past the end are topped up with distinct
indices already used earlier in the epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClassIndex:
    small: np.ndarray
    large: np.ndarray
    small_label: int

    @property
    def n_small(self) -> int:
        return len(self.small)

    @property
    def n_large(self) -> int:
        return len(self.large)

    @property
    def n_total(self) -> int:
        return self.n_small + self.n_large

    @property
    def batch_size(self) -> int:
        return 2 * self.n_small

    @property
    def n_batches(self) -> int:
        return self.n_total // self.n_small


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[np.ndarray, ...]

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


def make_class_index(y) -> ClassIndex:
    y = np.asarray(y).ravel()
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    ones = np.flatnonzero(y == 1)
    zeros = np.flatnonzero(y == 0)
    if len(ones) == 0 or len(zeros) == 0:
        raise ValueError("both classes must be present")
    if len(ones) <= len(zeros):
        return ClassIndex(ones, zeros, 1)
    return ClassIndex(zeros, ones, 0)


def make_epoch_batches(idx: ClassIndex, rng: np.random.Generator) -> BatchPlan:
    vs, vl, nb = idx.n_small, idx.n_large, idx.n_batches
    order = idx.large[rng.permutation(vl)]
    batches = []
    for b in range(nb):
        lo = b * vs
        chunk = order[lo:lo + vs]
        short = vs - len(chunk)
        if short:
            # reuse distinct indices from the part of the epoch already consumed
            pool = np.setdiff1d(order[:min(lo, vl)], chunk, assume_unique=True)
            chunk = np.concatenate([chunk, rng.choice(pool, size=short, replace=False)])
        batches.append(np.concatenate([idx.small, chunk]))
    return BatchPlan(tuple(batches))


def make_shuffled_batches(n: int, batch_size: int, n_batches: int,
                          rng: np.random.Generator) -> BatchPlan:
    """Plain fixed-size batches drawn from back-to-back shuffles of ``range(n)``.

    Used for the unbalanced ablation, with the same batch size and count as
    the balanced plan so that only the class mix differs.
    """
    need = batch_size * n_batches
    stream = np.concatenate([rng.permutation(n) for _ in range(-(-need // n))])
    batches = []
    for b in range(n_batches):
        chunk = stream[b * batch_size:(b + 1) * batch_size]
        if len(np.unique(chunk)) < len(chunk):
            # a chunk straddling two shuffles can repeat an index; redraw it
            chunk = rng.choice(n, size=min(batch_size, n), replace=False)
        batches.append(chunk)
    return BatchPlan(tuple(batches))
