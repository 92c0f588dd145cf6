"""Set-partition helpers for moment/cumulant conversions on small index sets."""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np

Partition = tuple[tuple[int, ...], ...]


@lru_cache(maxsize=None)
def set_partitions(n: int) -> tuple[Partition, ...]:
    """All partitions of ``range(n)`` into nonempty blocks."""
    if n == 0:
        return ((),)
    out = []
    for part in set_partitions(n - 1):
        # new element n-1 either joins an existing block or opens its own
        for i in range(len(part)):
            blocks = list(part)
            blocks[i] = blocks[i] + (n - 1,)
            out.append(tuple(blocks))
        out.append(part + ((n - 1,),))
    return tuple(out)


@lru_cache(maxsize=None)
def partitions_min_block(n: int, min_block: int) -> tuple[Partition, ...]:
    return tuple(p for p in set_partitions(n) if all(len(b) >= min_block for b in p))


@lru_cache(maxsize=None)
def singles_and_pairs(n: int) -> tuple[Partition, ...]:
    """Partitions of ``range(n)`` whose blocks have size 1 or 2."""
    return tuple(p for p in set_partitions(n) if all(len(b) <= 2 for b in p))


def symmetric_index_classes(d: int, k: int):
    """Yield (sorted index tuple, all distinct permutations) for a symmetric order-k tensor."""
    for idx in itertools.combinations_with_replacement(range(d), k):
        yield idx, set(itertools.permutations(idx))


def fill_symmetric(d: int, k: int, value_of, batch_shape: tuple[int, ...] = ()) -> np.ndarray:
    """Build a fully symmetric tensor from a function of sorted index tuples."""
    out = np.zeros(batch_shape + (d,) * k)
    for idx, perms in symmetric_index_classes(d, k):
        v = value_of(idx)
        for p in perms:
            out[(Ellipsis,) + p] = v
    return out


def moments_from_cumulants(kappa: dict[int, np.ndarray], idx: tuple[int, ...]) -> np.ndarray | float:
    """Central moment E[prod (X_i - m_i)] from cumulant tensors of order >= 2.

    ``kappa[k]`` holds the order-k cumulant tensor; trailing axes are indices.
    """
    total = 0.0
    for part in partitions_min_block(len(idx), 2):
        term = 1.0
        for block in part:
            term = term * kappa[len(block)][(Ellipsis,) + tuple(idx[j] for j in block)]
        total = total + term
    return total


def cumulants_from_central_moments(moment_of, idx: tuple[int, ...]):
    """Joint cumulant of order len(idx) >= 2 from a central-moment function.

    ``moment_of`` maps a sorted index tuple to the central moment of that block.
    Blocks of size one have zero central moment and drop out.
    """
    total = 0.0
    for part in partitions_min_block(len(idx), 2):
        m = len(part)
        coef = (-1) ** (m - 1) * math.factorial(m - 1)
        term = coef
        for block in part:
            term = term * moment_of(tuple(sorted(idx[j] for j in block)))
        total = total + term
    return total
