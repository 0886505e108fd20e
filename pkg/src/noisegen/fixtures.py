"""Procedural clean images for self-contained experiments and tests."""

from __future__ import annotations

import numpy as np

__all__ = ["synthetic_clean_patches"]


def synthetic_clean_patches(n: int, size: int = 32, seed=0) -> np.ndarray:
    """``n`` RGB scenes of shape (n, 3, size, size) in [0.02, 0.95].

    Each patch is a gradient from a shadow color to a highlight color with
    one to three flat discs, so every patch spans dark and bright regions
    and contains edges.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    out = np.empty((n, 3, size, size))
    for i in range(n):
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * xx + np.sin(angle) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        dark, bright = rng.uniform(0.02, 0.15, 3), rng.uniform(0.7, 0.95, 3)
        img = dark[:, None, None] + (bright - dark)[:, None, None] * ramp[None]
        for _ in range(rng.integers(1, 4)):
            shade = rng.uniform(0.02, 0.15, 3) if rng.random() < 0.5 else rng.uniform(0.6, 0.95, 3)
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.1, 0.35)
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            img = np.where(disc[None], shade[:, None, None], img)
        out[i] = img
    return out.astype(np.float32)
