"""Noise-distribution metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

__all__ = [
    "AkldConfig",
    "local_moments",
    "gaussian_kl_map",
    "akld",
    "akld_from_noise",
    "psnr",
    "noise_std_curve",
    "spatial_autocorr",
    "histogram_kl",
    "white_gaussian_like",
    "write_report",
]


@dataclass(frozen=True)
class AkldConfig:
    window: int = 7
    samples_per_image: int = 8
    variance_floor: float = 1e-6

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.samples_per_image < 1:
            raise ValueError("samples_per_image must be at least 1")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")


def _as4(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    while a.ndim < 4:
        a = a[None]
    return a


def local_moments(noise, window: int = 7, variance_floor: float = 1e-6):
    """Box-window mean and (floored) variance per pixel and channel."""
    n = _as4(noise)
    size = (1, 1, window, window)
    mu = uniform_filter(n, size=size, mode="reflect")
    var = uniform_filter(n * n, size=size, mode="reflect") - mu * mu
    return mu, np.maximum(var, variance_floor)


def gaussian_kl_map(mu_r, var_r, mu_g, var_g) -> np.ndarray:
    """Per-pixel KL(N(mu_r, var_r) || N(mu_g, var_g))."""
    return 0.5 * np.log(var_g / var_r) + (var_r + (mu_r - mu_g) ** 2) / (2.0 * var_g) - 0.5


def akld_from_noise(real_noise, generated_noise: Iterable, cfg: AkldConfig = AkldConfig()) -> float:
    """AKLD between a real noise map and one or more generated noise maps."""
    real = _as4(real_noise)
    mu_r, var_r = local_moments(real, cfg.window, cfg.variance_floor)
    total, count = 0.0, 0
    for gen in generated_noise:
        g = _as4(gen)
        if g.shape != real.shape:
            raise ValueError(f"generated noise {g.shape} does not match real {real.shape}")
        mu_g, var_g = local_moments(g, cfg.window, cfg.variance_floor)
        total += float(gaussian_kl_map(mu_r, var_r, mu_g, var_g).mean())
        count += 1
    if count == 0:
        raise ValueError("at least one generated sample is required")
    return total / count


def akld(clean, real_noisy, generator, cfg: AkldConfig = AkldConfig()) -> float:
    """Average local-Gaussian KL between real and generated noise.

    ``generator`` is either a callable ``k -> noisy image`` (called
    ``cfg.samples_per_image`` times) or a sequence of generated images.
    Noise maps are ``noisy - clean``; statistics come from a
    ``window x window`` box filter and KL is taken as KL(real || generated).
    """
    clean = np.asarray(clean, dtype=np.float64)
    real_noisy = np.asarray(real_noisy, dtype=np.float64)
    if clean.shape != real_noisy.shape:
        raise ValueError(f"clean {clean.shape} and real_noisy {real_noisy.shape} differ")
    if callable(generator):
        samples = (generator(k) for k in range(cfg.samples_per_image))
    else:
        samples = generator
    return akld_from_noise(real_noisy - clean, (np.asarray(g, np.float64) - clean for g in samples), cfg)


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12 * peak * peak:
        return 99.0
    return min(99.0, 10.0 * math.log10(peak * peak / mse))


def noise_std_curve(clean, noisy, bins: int = 16, value_range=(0.0, 1.0)) -> list[tuple[float, float]]:
    """Std of ``noisy - clean`` per clean-intensity bin; empty bins are skipped."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    c = np.asarray(clean, dtype=np.float64).ravel()
    d = np.asarray(noisy, dtype=np.float64).ravel() - c
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    idx = np.clip(np.digitize(c, edges) - 1, 0, bins - 1)
    out = []
    for b in range(bins):
        sel = d[idx == b]
        if sel.size:
            out.append((0.5 * (edges[b] + edges[b + 1]), float(sel.std())))
    return out


def spatial_autocorr(noise, lags: Sequence[tuple[int, int]] = ((0, 1),)) -> list[float]:
    """Mean-removed normalized correlation at each (dy, dx) lag, averaged over images and channels."""
    n = _as4(noise)
    h, w = n.shape[2:]
    n = n - n.mean(axis=(2, 3), keepdims=True)
    out = []
    for dy, dx in lags:
        if abs(dy) >= h or abs(dx) >= w:
            raise ValueError(f"lag {(dy, dx)} out of range for {h}x{w} images")
        a = n[:, :, max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)]
        b = n[:, :, max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
        num = (a * b).mean(axis=(2, 3))
        den = np.sqrt((a * a).mean(axis=(2, 3)) * (b * b).mean(axis=(2, 3)))
        valid = den > 0
        out.append(float((num[valid] / den[valid]).mean()) if valid.any() else 0.0)
    return out


def histogram_kl(a, b, bins: int = 64, value_range=None, eps: float = 1e-6) -> float:
    """Discrete KL(hist(a) || hist(b)) with ``eps`` added to every bin."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if value_range is None:
        value_range = (min(a.min(), b.min()), max(a.max(), b.max()))
    lo, hi = value_range
    if not hi > lo:
        raise ValueError(f"degenerate histogram range {value_range}")
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    p = ha / max(ha.sum(), 1) + eps
    q = hb / max(hb.sum(), 1) + eps
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def white_gaussian_like(clean, real_noisy, rng) -> np.ndarray:
    """White Gaussian noise matched to the per-image, per-channel variance of the real noise."""
    clean = _as4(clean)
    noise = _as4(real_noisy) - clean
    std = noise.std(axis=(2, 3), keepdims=True)
    return clean + std * rng.standard_normal(clean.shape)


def write_report(path, records: Sequence[dict], aggregate: dict) -> None:
    """One JSON object per line for each record, then the aggregate."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"aggregate": aggregate}, sort_keys=True) + "\n")
