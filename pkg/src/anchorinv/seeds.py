"""Deterministic sub-seed derivation.

Every source of randomness in the package is keyed by a 64-bit seed derived
from a master seed plus a path of small integers (trial index, session index,
sample index, ...).  The derivation is a splitmix64 chain: it is cheap,
stateless, and two distinct paths collide with negligible probability, so
independent components can draw from independent streams without any shared
generator object being threaded through the code.
"""

from __future__ import annotations

import numpy as np

__all__ = ["splitmix64", "derive_seed", "make_rng"]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(value: int) -> int:
    """One splitmix64 output step for a 64-bit state."""
    z = (value + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, *path: int) -> int:
    """Derive a 64-bit sub-seed from ``master`` and a path of integers.

    The chain folds each path component into the running state before a
    splitmix64 scramble, so ``derive_seed(s, a, b) != derive_seed(s, b, a)``
    in general and sibling streams are decorrelated.
    """
    state = splitmix64(master & _MASK64)
    for component in path:
        state = splitmix64((state ^ ((component & _MASK64) * _GOLDEN)) & _MASK64)
    return state


def make_rng(master: int, *path: int) -> np.random.Generator:
    """numpy Generator seeded from :func:`derive_seed`."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *path)))
