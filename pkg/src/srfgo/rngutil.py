"""Seeded random streams shared by the simulation generators.

Gaussian draws go through the inverse-CDF method (standard-normal quantile
applied to PCG64 uniforms) instead of numpy's ziggurat sampler, so a stream is
fully pinned by (seed, stream label, draw order) and reproducible by any
implementation of the same named algorithm.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

# Stream labels keep independent purposes (GPS noise, odometry noise, ...)
# decorrelated under a single run seed.
GPS_STREAM = 1
ODOMETRY_STREAM = 2
TRAJECTORY_STREAM = 3
CLOUD_STREAM = 4


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator keyed by (seed, stream)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def normal(rng: np.random.Generator, size=None) -> np.ndarray | float:
    """Standard normal draws via the inverse CDF of uniform variates."""
    u = rng.random(size)
    # random() can return exactly 0.0 where ndtri diverges; nudge into (0, 1).
    u = np.clip(u, 1e-300, None)
    return ndtri(u)
