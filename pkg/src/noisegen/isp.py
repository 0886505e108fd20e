"""Poisson-Gaussian sensor noise and a simplified camera ISP.

The simulator is the ground truth for desk-scale training and evaluation:
``y = ISP(s + n)`` with heteroscedastic Gaussian raw noise ``n`` whose
variance grows with signal, ISO gain and short exposures, followed by white
balance, a color matrix, a blur/unsharp pair that spatially correlates the
noise, clamping and gamma encoding.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate

from .model import CameraSettings

__all__ = [
    "SensorProfile",
    "NoisyPair",
    "ProfileError",
    "BUILTIN_PROFILES",
    "get_profile",
    "load_profile",
    "save_profile",
    "raw_noise",
    "isp_pipeline",
    "make_noisy_pair",
    "noise_std_scale",
]

IDENTITY_KERNEL = ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 0.0))
BOX_KERNEL = tuple(tuple(1.0 / 9.0 for _ in range(3)) for _ in range(3))
PLUS_KERNEL = ((0.0, 0.125, 0.0), (0.125, 0.5, 0.125), (0.0, 0.125, 0.0))
GAUSS_KERNEL = ((1 / 16, 2 / 16, 1 / 16), (2 / 16, 4 / 16, 2 / 16), (1 / 16, 2 / 16, 1 / 16))


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class SensorProfile:
    """Noise and ISP constants for one sensor.

    ``read_sigma`` and ``shot_k`` are given at ISO 100 and the reference
    exposure ``shutter_ref`` (seconds).  ``blur_kernel`` is applied first,
    then unsharp masking ``b + sharpen_amount * (b - unsharp_kernel * b)``.
    """

    name: str
    read_sigma: float
    shot_k: float
    ccm: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    awb: tuple = (1.0, 1.0, 1.0)
    gamma: float = 1.0
    sharpen_amount: float = 0.0
    blur_kernel: tuple = IDENTITY_KERNEL
    unsharp_kernel: tuple = GAUSS_KERNEL
    shutter_ref: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "ccm", tuple(tuple(float(v) for v in row) for row in self.ccm))
        object.__setattr__(self, "awb", tuple(float(v) for v in self.awb))
        object.__setattr__(self, "blur_kernel", tuple(tuple(float(v) for v in r) for r in self.blur_kernel))
        object.__setattr__(self, "unsharp_kernel", tuple(tuple(float(v) for v in r) for r in self.unsharp_kernel))
        self.validate()

    def validate(self, require_noise: bool = False) -> None:
        """Check invariants.  Noise-free profiles are only accepted in code, not from files."""
        ccm = np.asarray(self.ccm)
        if ccm.shape != (3, 3):
            raise ProfileError(f"{self.name}: ccm must be 3x3")
        if not np.allclose(ccm.sum(axis=1), 1.0, atol=1e-6):
            raise ProfileError(f"{self.name}: ccm rows must sum to 1, got {ccm.sum(axis=1)}")
        if len(self.awb) != 3 or min(self.awb) <= 0:
            raise ProfileError(f"{self.name}: awb needs 3 positive gains")
        if self.gamma <= 0:
            raise ProfileError(f"{self.name}: gamma must be positive")
        if self.read_sigma < 0 or self.shot_k < 0:
            raise ProfileError(f"{self.name}: noise parameters must be non-negative")
        if require_noise and self.read_sigma == 0 and self.shot_k == 0:
            raise ProfileError(f"{self.name}: read_sigma and shot_k cannot both be 0")
        if self.sharpen_amount < 0:
            raise ProfileError(f"{self.name}: sharpen_amount must be non-negative")
        if self.shutter_ref <= 0:
            raise ProfileError(f"{self.name}: shutter_ref must be positive")
        for kname in ("blur_kernel", "unsharp_kernel"):
            k = np.asarray(getattr(self, kname))
            if k.shape != (3, 3) or not np.isclose(k.sum(), 1.0, atol=1e-6):
                raise ProfileError(f"{self.name}: {kname} must be a 3x3 kernel summing to 1")

    @property
    def is_noiseless(self) -> bool:
        return self.read_sigma == 0 and self.shot_k == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("ccm", "blur_kernel", "unsharp_kernel"):
            d[k] = [list(r) for r in d[k]]
        d["awb"] = list(d["awb"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SensorProfile":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ProfileError(f"unknown profile fields: {sorted(unknown)}")
        for required in ("name", "read_sigma", "shot_k"):
            if required not in d:
                raise ProfileError(f"profile is missing field {required!r}")
        try:
            profile = cls(**d)
        except TypeError as exc:
            raise ProfileError(str(exc)) from exc
        profile.validate(require_noise=True)
        return profile


@dataclass
class NoisyPair:
    clean: np.ndarray
    noisy: np.ndarray
    settings: CameraSettings
    profile_name: str
    meta: dict = field(default_factory=dict)


# Two shipped sensors.  Read noise dominates, so after gamma encoding the
# sRGB noise is strongest in shadows.  sensorB has a stronger color matrix,
# bluer white balance, higher gamma and heavier sharpening than sensorA.
BUILTIN_PROFILES: dict[str, SensorProfile] = {
    "sensorA": SensorProfile(
        name="sensorA",
        read_sigma=0.002,
        shot_k=2e-6,
        ccm=((1.50, -0.35, -0.15), (-0.20, 1.40, -0.20), (-0.05, -0.40, 1.45)),
        awb=(1.9, 1.0, 1.6),
        gamma=2.2,
        sharpen_amount=0.5,
        blur_kernel=PLUS_KERNEL,
    ),
    "sensorB": SensorProfile(
        name="sensorB",
        read_sigma=0.002,
        shot_k=4e-6,
        ccm=((1.80, -0.60, -0.20), (-0.30, 1.60, -0.30), (-0.10, -0.70, 1.80)),
        awb=(1.5, 1.0, 2.3),
        gamma=2.4,
        sharpen_amount=0.8,
        blur_kernel=PLUS_KERNEL,
    ),
}


def get_profile(name: str) -> SensorProfile:
    try:
        return BUILTIN_PROFILES[name]
    except KeyError:
        raise ProfileError(
            f"unknown sensor profile {name!r}; known: {sorted(BUILTIN_PROFILES)}"
        ) from None


def load_profile(path) -> SensorProfile:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ProfileError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ProfileError(f"{path}: profile must be a JSON object")
    return SensorProfile.from_dict(d)


def save_profile(profile: SensorProfile, path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2))


def noise_std_scale(settings: CameraSettings, profile: SensorProfile) -> float:
    """Multiplier on the ISO-100 noise std from ISO gain and exposure time.

    Variance scales with ``gain**2 / sqrt(shutter / shutter_ref)``.
    """
    gain = settings.iso / 100.0
    return gain / (settings.shutter_speed / profile.shutter_ref) ** 0.25


def raw_noise(clean_linear, settings: CameraSettings, profile: SensorProfile, rng) -> np.ndarray:
    """Add heteroscedastic Gaussian noise to a linear image in [0, 1]."""
    x = np.asarray(clean_linear, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("clean_linear must lie in [0, 1]")
    var = profile.shot_k * x + profile.read_sigma ** 2
    std = np.sqrt(var) * noise_std_scale(settings, profile)
    return x + std * np.random.default_rng(rng).standard_normal(x.shape)


def _filter3(img: np.ndarray, kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    return correlate(img, k[None, None], mode="reflect")


def isp_pipeline(raw, profile: SensorProfile) -> np.ndarray:
    """AWB, color matrix, blur + unsharp mask, clamp, gamma encode.

    ``raw`` is (N, 3, H, W) or (3, H, W) and may leave [0, 1].
    """
    x = np.asarray(raw, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"isp_pipeline expects (N, 3, H, W), got {np.shape(raw)}")
    x = x * np.asarray(profile.awb).reshape(1, 3, 1, 1)
    x = np.einsum("ij,njhw->nihw", np.asarray(profile.ccm), x)
    if profile.blur_kernel != IDENTITY_KERNEL:
        x = _filter3(x, profile.blur_kernel)
    if profile.sharpen_amount > 0:
        x = x + profile.sharpen_amount * (x - _filter3(x, profile.unsharp_kernel))
    x = np.clip(x, 0.0, 1.0)
    if profile.gamma != 1.0:
        x = x ** (1.0 / profile.gamma)
    return x[0] if squeeze else x


def unprocess(clean_srgb, profile: SensorProfile) -> np.ndarray:
    """Approximate inverse of the color stages: gamma, color matrix, white balance."""
    x = np.asarray(clean_srgb, dtype=np.float64) ** profile.gamma
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    x = np.einsum("ij,njhw->nihw", np.linalg.inv(np.asarray(profile.ccm)), x)
    x = x / np.asarray(profile.awb).reshape(1, 3, 1, 1)
    x = np.clip(x, 0.0, 1.0)
    return x[0] if squeeze else x


def make_noisy_pair(clean_srgb, settings: CameraSettings, profile, rng) -> NoisyPair:
    """Simulate a noisy capture of ``clean_srgb``.

    The returned ``clean`` is the noise-free image rendered through the same
    ISP, so ``noisy - clean`` is exactly the processed sensor noise.
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    s = np.asarray(clean_srgb, dtype=np.float64)
    if s.size and (s.min() < 0 or s.max() > 1):
        raise ValueError("clean image must lie in [0, 1]")
    linear = unprocess(s, profile)
    clean = isp_pipeline(linear, profile)
    noisy = isp_pipeline(raw_noise(linear, settings, profile, rng), profile)
    return NoisyPair(
        clean=clean.astype(np.float32),
        noisy=noisy.astype(np.float32),
        settings=settings,
        profile_name=profile.name,
    )
