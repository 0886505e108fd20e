"""Conditioned noise-prediction UNet.

Three-scale UNet (widths 16/32/64 by default) with

* per-block feature-wise affine modulation driven by the diffusion step and
  the encoded camera settings (``gamma * F + beta``, with ``gamma`` starting
  at 1 and ``beta`` at 0), and
* a second, non-shared encoder over the clean image whose features join the
  decoder at all three scales next to the usual skip connections.

Parameters live in a flat ``{name: array}`` dict whose key set is fixed by
:func:`parameter_manifest`.  Passing :class:`~noisegen.numerics.Var` values
instead of arrays records the forward pass on a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx

__all__ = [
    "BRIGHTNESS_MODES",
    "CameraSettings",
    "ModelConfig",
    "VocabularyError",
    "parameter_manifest",
    "parameter_count",
    "init_params",
    "sinusoidal_embed",
    "camera_features",
    "encode_camera_settings",
    "condition_vector",
    "tccam",
    "apply_affine",
    "mcam_features",
    "eps_theta",
]

BRIGHTNESS_MODES = ("low", "normal", "high")
MODULATED_BLOCKS = ("enc1", "enc2", "enc3", "mid", "dec3", "dec2", "dec1")
# What the chain generates: the noisy image itself, or its scaled residual
# ``residual_scale * (noisy - clean)``.
TARGETS = ("image", "residual")


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class CameraSettings:
    iso: float
    shutter_speed: float
    sensor_type: str
    color_temp: float = 5500.0
    brightness_mode: str = "normal"

    def __post_init__(self):
        if not self.iso > 0:
            raise ValueError(f"iso must be positive, got {self.iso}")
        if not self.shutter_speed > 0:
            raise ValueError(f"shutter_speed must be positive, got {self.shutter_speed}")
        if self.brightness_mode not in BRIGHTNESS_MODES:
            raise ValueError(
                f"brightness_mode must be one of {BRIGHTNESS_MODES}, got {self.brightness_mode!r}"
            )
        object.__setattr__(self, "color_temp", float(min(max(self.color_temp, 2000.0), 10000.0)))

    def to_dict(self) -> dict:
        return {
            "iso": self.iso,
            "shutter_speed": self.shutter_speed,
            "sensor_type": self.sensor_type,
            "color_temp": self.color_temp,
            "brightness_mode": self.brightness_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSettings":
        return cls(
            iso=float(d["iso"]),
            shutter_speed=float(d["shutter_speed"]),
            sensor_type=str(d["sensor_type"]),
            color_temp=float(d.get("color_temp", 5500.0)),
            brightness_mode=str(d.get("brightness_mode", "normal")),
        )


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    scales: int = 3
    time_embed_dim: int = 32
    cs_embed_dim: int = 32
    mlp_hidden: int = 64
    in_channels: int = 3
    sensor_vocab: tuple = ("sensorA", "sensorB")
    target: str = "image"
    residual_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sensor_vocab", tuple(self.sensor_vocab))
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if not self.residual_scale > 0:
            raise ValueError("residual_scale must be positive")
        if self.scales != 3:
            raise ValueError("the architecture has exactly 3 scales")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if len(set(self.sensor_vocab)) != len(self.sensor_vocab) or not self.sensor_vocab:
            raise ValueError("sensor_vocab must be a non-empty list of unique names")

    @property
    def widths(self) -> tuple[int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 4 * c)

    @property
    def camera_feature_dim(self) -> int:
        return 2 + len(self.sensor_vocab) + 1 + len(BRIGHTNESS_MODES)

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "scales": self.scales,
            "time_embed_dim": self.time_embed_dim,
            "cs_embed_dim": self.cs_embed_dim,
            "mlp_hidden": self.mlp_hidden,
            "in_channels": self.in_channels,
            "sensor_vocab": list(self.sensor_vocab),
            "target": self.target,
            "residual_scale": self.residual_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["sensor_vocab"] = tuple(d.get("sensor_vocab", ("sensorA", "sensorB")))
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter manifest


def _block_channels(config: ModelConfig) -> dict[str, tuple[int, int]]:
    c1, c2, c3 = config.widths
    cin = config.in_channels
    return {
        "enc1": (cin, c1),
        "enc2": (c1, c2),
        "enc3": (c2, c3),
        "clean1": (cin, c1),
        "clean2": (c1, c2),
        "clean3": (c2, c3),
        "mid": (c3, c3),
        "dec3": (3 * c3, c3),
        "dec2": (c3 + 2 * c2, c2),
        "dec1": (c2 + 2 * c1, c1),
    }


def _mlp_shapes(prefix: str, n_in: int, hidden: int, n_out: int) -> dict[str, tuple]:
    return {
        f"{prefix}.l1.weight": (hidden, n_in),
        f"{prefix}.l1.bias": (hidden,),
        f"{prefix}.l2.weight": (hidden, hidden),
        f"{prefix}.l2.bias": (hidden,),
        f"{prefix}.l3.weight": (n_out, hidden),
        f"{prefix}.l3.bias": (n_out,),
    }


def parameter_manifest(config: ModelConfig) -> dict[str, tuple]:
    """Ordered map of every parameter name to its shape."""
    shapes: dict[str, tuple] = {}
    h, e = config.mlp_hidden, config.cs_embed_dim
    shapes.update(_mlp_shapes("time_mlp", config.time_embed_dim, h, e))
    shapes.update(_mlp_shapes("cs_mlp", config.camera_feature_dim, h, e))
    blocks = _block_channels(config)
    for name, (cin, cout) in blocks.items():
        shapes[f"{name}.conv1.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.conv1.bias"] = (cout,)
        shapes[f"{name}.conv2.weight"] = (cout, cout, 3, 3)
        shapes[f"{name}.conv2.bias"] = (cout,)
    for name in MODULATED_BLOCKS:
        shapes.update(_mlp_shapes(f"film.{name}", e, h, 2 * blocks[name][1]))
    c1 = config.widths[0]
    shapes["out.weight"] = (config.in_channels, c1, 3, 3)
    shapes["out.bias"] = (config.in_channels,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_manifest(config).values()))


def init_params(config: ModelConfig, rng=None, dtype=np.float32) -> dict[str, np.ndarray]:
    """Random weights, zero biases, zeroed output layers of the modulation heads."""
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape in parameter_manifest(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith("film.") and ".l3." in name:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            scale = 1.0 / math.sqrt(fan_in)
            if name == "out.weight":
                scale *= 0.1
            params[name] = (rng.standard_normal(shape) * scale).astype(dtype)
    return params


def check_params(params: dict, config: ModelConfig) -> None:
    manifest = parameter_manifest(config)
    missing = set(manifest) - set(params)
    extra = set(params) - set(manifest)
    if missing or extra:
        raise KeyError(f"parameter set mismatch; missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in manifest.items():
        if tuple(nx.value_of(params[name]).shape) != tuple(shape):
            raise nx.DimensionError(
                f"parameter {name} has shape {nx.value_of(params[name]).shape}, expected {shape}",
                (name,),
            )


# ---------------------------------------------------------------------------
# conditioning


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding, frequencies from 1 down to 1/10000.

    ``t`` may be a scalar (returns shape (dim,)) or a 1-D array of steps
    (returns (len(t), dim)).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    ts = np.asarray(t, dtype=np.float64)
    if np.any(ts < 0):
        raise ValueError("step must be non-negative")
    half = dim // 2
    if half > 1:
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    phase = ts[..., None] * freqs
    out = np.empty(ts.shape + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def camera_features(settings, config: ModelConfig) -> np.ndarray:
    """Raw encoding of one or many :class:`CameraSettings`.

    ``[log2(iso/100), log2(1000*shutter), one-hot sensor, (K-2000)/8000,
    one-hot brightness]``
    """
    single = isinstance(settings, CameraSettings)
    items = [settings] if single else list(settings)
    vocab = config.sensor_vocab
    rows = []
    for cs in items:
        if cs.sensor_type not in vocab:
            raise VocabularyError(
                f"unknown sensor_type {cs.sensor_type!r}; known sensors: {list(vocab)}"
            )
        sensor = [0.0] * len(vocab)
        sensor[vocab.index(cs.sensor_type)] = 1.0
        bright = [0.0] * len(BRIGHTNESS_MODES)
        bright[BRIGHTNESS_MODES.index(cs.brightness_mode)] = 1.0
        rows.append(
            [math.log2(cs.iso / 100.0), math.log2(cs.shutter_speed * 1000.0)]
            + sensor
            + [(cs.color_temp - 2000.0) / 8000.0]
            + bright
        )
    out = np.asarray(rows, dtype=np.float64)
    return out[0] if single else out


def _mlp(x, params, prefix):
    h = nx.activation(nx.linear(x, params[f"{prefix}.l1.weight"], params[f"{prefix}.l1.bias"]), "silu")
    h = nx.activation(nx.linear(h, params[f"{prefix}.l2.weight"], params[f"{prefix}.l2.bias"]), "silu")
    return nx.linear(h, params[f"{prefix}.l3.weight"], params[f"{prefix}.l3.bias"])


def _dtype_of(params) -> np.dtype:
    return nx.value_of(params["out.weight"]).dtype


def encode_camera_settings(settings, params, config: ModelConfig):
    """Camera-settings embedding: the raw features through ``cs_mlp``."""
    feats = camera_features(settings, config).astype(_dtype_of(params))
    return _mlp(feats, params, "cs_mlp")


def condition_vector(t, settings, params, config: ModelConfig):
    """``time_mlp(sinusoidal(t)) + cs_mlp(features(cs))`` per batch item.

    ``settings`` may also be a precomputed raw feature matrix.
    """
    dtype = _dtype_of(params)
    temb = sinusoidal_embed(np.atleast_1d(t), config.time_embed_dim).astype(dtype)
    if isinstance(settings, np.ndarray):
        feats = np.atleast_2d(settings).astype(dtype)
    else:
        feats = np.atleast_2d(camera_features(settings, config)).astype(dtype)
    if temb.shape[0] != feats.shape[0]:
        if temb.shape[0] == 1:
            temb = np.repeat(temb, feats.shape[0], axis=0)
        elif feats.shape[0] == 1:
            feats = np.repeat(feats, temb.shape[0], axis=0)
        else:
            raise nx.DimensionError(
                f"{temb.shape[0]} steps but {feats.shape[0]} camera settings", ("t", "cs")
            )
    return nx.add(_mlp(temb, params, "time_mlp"), _mlp(feats, params, "cs_mlp"))


def tccam(cond, params, layer_id: str):
    """Per-item ``(gamma, beta)`` for one modulated block."""
    if layer_id not in MODULATED_BLOCKS:
        raise KeyError(f"unknown modulated layer {layer_id!r}; valid: {MODULATED_BLOCKS}")
    head = _mlp(cond, params, f"film.{layer_id}")
    dgamma, beta = nx.split_features(head, 2)
    return nx.add(dgamma, 1.0), beta


def apply_affine(features, gamma, beta):
    return nx.affine_channels(features, gamma, beta)


# ---------------------------------------------------------------------------
# network


def _conv_block(x, params, name, cond=None):
    h = nx.conv2d(x, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"])
    h = nx.activation(h, "silu")
    h = nx.conv2d(h, params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"])
    if cond is not None:
        gamma, beta = tccam(cond, params, name)
        h = apply_affine(h, gamma, beta)
    return nx.activation(h, "silu")


def _check_spatial(x, what: str) -> None:
    shape = nx.value_of(x).shape
    if len(shape) != 4:
        raise nx.DimensionError(f"{what} must be rank 4 (N, C, H, W), got {shape}", (what,))
    if shape[2] % 4 or shape[3] % 4:
        raise nx.DimensionError(
            f"{what} spatial extents must be divisible by 4, got {shape[2]}x{shape[3]}",
            (f"{what}.height", f"{what}.width"),
        )


def _encode(x, params, prefix, cond=None):
    f1 = _conv_block(x, params, f"{prefix}1", cond)
    f2 = _conv_block(nx.resample(f1, "down2-avg"), params, f"{prefix}2", cond)
    f3 = _conv_block(nx.resample(f2, "down2-avg"), params, f"{prefix}3", cond)
    return [f1, f2, f3]


def mcam_features(s, params) -> list:
    """Clean-image features at full, 1/2 and 1/4 resolution."""
    _check_spatial(s, "s")
    return _encode(s, params, "clean")


def eps_theta(x_t, t, s, settings, params, config: ModelConfig, clean_features=None):
    """Predicted noise for ``x_t`` at step(s) ``t``.

    ``clean_features`` lets samplers reuse :func:`mcam_features` of a fixed
    clean image across steps.
    """
    _check_spatial(x_t, "x_t")
    xs = nx.value_of(x_t).shape
    if clean_features is None:
        if nx.value_of(s).shape != xs:
            raise nx.DimensionError(
                f"x_t {xs} and s {nx.value_of(s).shape} must have the same shape", ("x_t", "s")
            )
        clean_features = mcam_features(s, params)
    cond = condition_vector(t, settings, params, config)
    if nx.value_of(cond).shape[0] not in (1, xs[0]):
        raise nx.DimensionError("conditioning batch does not match x_t batch", ("cs", "x_t.batch"))
    fx1, fx2, fx3 = _encode(x_t, params, "enc", cond)
    fs1, fs2, fs3 = clean_features
    h = _conv_block(fx3, params, "mid", cond)
    h = _conv_block(nx.concat_channels(h, fs3, fx3), params, "dec3", cond)
    h = _conv_block(nx.concat_channels(nx.resample(h, "up2-nearest"), fs2, fx2), params, "dec2", cond)
    h = _conv_block(nx.concat_channels(nx.resample(h, "up2-nearest"), fs1, fx1), params, "dec1", cond)
    return nx.conv2d(h, params["out.weight"], params["out.bias"])
