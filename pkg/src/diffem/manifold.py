"""Synthetic 5-dimensional manifold task.

Clean data live on the closed curve

    x(u) = (sin u, cos u, sin 2u, cos 2u, sin 3u) / sqrt(2),  u in [0, 2*pi),

so x1^2 + x2^2 = 1/2 and x3^2 + x4^2 = 1/2 identically.  Observations are
2-dim projections with rows drawn uniformly from the unit sphere plus
Gaussian noise.
"""

from __future__ import annotations

import numpy as np

from .channels import CorruptionChannel
from .rng import stream

CURVE_DIM = 5


def curve(u: np.ndarray) -> np.ndarray:
    """Map parameters u (shape (n,)) to points on the curve, shape (n, 5)."""
    u = np.asarray(u, dtype=np.float64)
    pts = np.stack(
        [np.sin(u), np.cos(u), np.sin(2 * u), np.cos(2 * u), np.sin(3 * u)],
        axis=-1,
    )
    return pts / np.sqrt(2.0)


def manifold_channel(sigma_y_sq: float = 1e-4) -> CorruptionChannel:
    return CorruptionChannel(
        kind="sphere", dim_x=CURVE_DIM, rows=2, sigma_y=float(np.sqrt(sigma_y_sq))
    )


def generate_manifold_dataset(n: int, sigma_y_sq: float, seed: int):
    """Clean curve samples plus sphere-projection observations.

    Returns (clean, observations, channel).  Bit-identical for a fixed seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma_y_sq < 0:
        raise ValueError("sigma_y_sq must be >= 0")
    channel = manifold_channel(sigma_y_sq)
    rng = stream(seed, "manifold-data")
    u = rng.uniform(0.0, 2 * np.pi, size=n)
    clean = curve(u)
    obs_rng = stream(seed, "manifold-obs")
    observations = [channel.observe(x, obs_rng) for x in clean]
    return clean, observations, channel
