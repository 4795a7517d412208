"""Portable random streams.

Every random draw in the package goes through a ``numpy.random.Generator``
backed by ``PCG64``.  Gaussian variates are produced with Box-Muller from
``Generator.random`` so the stream depends only on the bit generator and
the 53-bit double conversion, both of which numpy keeps stable across
platforms and releases.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        seed = 0
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian(rng: np.random.Generator, shape, std: float = 1.0) -> np.ndarray:
    """Draw N(0, std^2) samples with the Box-Muller transform."""
    shape = tuple(np.atleast_1d(shape).astype(int)) if not isinstance(shape, tuple) else shape
    size = int(np.prod(shape, dtype=np.int64))
    half = (size + 1) // 2
    u1 = rng.random(half)
    u2 = rng.random(half)
    # u1 in [0, 1); shift to (0, 1] so the log is finite
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:size]
    return (std * z).reshape(shape)


def uniform(rng: np.random.Generator, shape, low: float, high: float) -> np.ndarray:
    return low + (high - low) * rng.random(shape)


def child_seed(rng: np.random.Generator) -> int:
    """Derive an independent integer seed from a parent stream."""
    return int(rng.integers(0, 2**63 - 1))
