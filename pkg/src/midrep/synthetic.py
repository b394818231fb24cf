"""Synthetic inputs for toy training and planted-signal checks."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import ALIGNED_SIDE

BLOB_COLORS = np.array([[230, 30, 30], [30, 230, 30], [30, 30, 230]], dtype=np.float64)


def color_blobs(n: int, seed: int = 0, radius=(20.0, 30.0), noise: float = 10.0, num_classes: int = 3):
    """Aligned-size ``(n, 3, 120, 120)`` images on [0, 255] with one class-colored disc each.

    Labels cycle through ``0 .. num_classes - 1``; disc centre and radius are
    random, and gray background plus disc both carry Gaussian pixel noise.
    """
    if not 2 <= num_classes <= len(BLOB_COLORS):
        raise ValueError(f"num_classes must be in [2, {len(BLOB_COLORS)}]")
    rng = np.random.default_rng(seed)
    side = ALIGNED_SIDE
    yy, xx = np.mgrid[:side, :side]
    images = np.empty((n, 3, side, side), dtype=np.float32)
    labels = np.arange(n) % num_classes
    for i in range(n):
        img = 128.0 + rng.normal(0, noise, (3, side, side))
        cy, cx = rng.uniform(side / 3, 2 * side / 3, 2)
        r = rng.uniform(*radius)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, disc] = BLOB_COLORS[labels[i]][:, None] + rng.normal(0, noise, (3, int(disc.sum())))
        images[i] = np.clip(img, 0, 255)
    return images, labels


def noise_patches(n: int, side: int, seed: int = 0, sigma: float = 1.0, scale: float = 0.5) -> np.ndarray:
    """Spatially smoothed Gaussian patches ``(n, 3, side, side)`` with standard deviation ``scale``."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3, side, side))
    if sigma > 0:
        x = ndimage.gaussian_filter(x, (0, 0, sigma, sigma))
    return (x / x.std() * scale).astype(np.float32)
