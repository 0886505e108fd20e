"""Forward noising process, training objective and parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import CameraSettings, ModelConfig, camera_features, eps_theta

__all__ = [
    "DiffusionSchedule",
    "TrainBatch",
    "AdamState",
    "make_beta_schedule",
    "q_sample",
    "to_model_space",
    "from_model_space",
    "encode_target",
    "decode_target",
    "training_step",
    "adam_init",
    "adam_update",
    "ema_update",
]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise tables indexed by step ``0..T``.

    Index 0 is the data end: ``alpha_bar[0] == 1`` and ``beta[0] == 0``.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def check_step(self, t, low: int = 1) -> np.ndarray:
        ts = np.asarray(t)
        if not np.issubdtype(ts.dtype, np.integer):
            if np.any(ts != np.round(ts)):
                raise ValueError(f"diffusion steps must be integers, got {t}")
            ts = ts.astype(np.int64)
        if np.any(ts < low) or np.any(ts > self.T):
            raise ValueError(f"step {t} outside [{low}, {self.T}]")
        return ts

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_beta_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4,
                       beta_end: float = 0.02) -> DiffusionSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else [beta_start]
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    posterior_var = np.zeros(T + 1)
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha, alpha_bar, posterior_var):
        arr.setflags(write=False)
    return DiffusionSchedule(T, beta, alpha, alpha_bar, posterior_var, kind, beta_start, beta_end)


def _per_item(values: np.ndarray, t, ndim: int, dtype) -> np.ndarray:
    v = np.asarray(values[t], dtype=dtype)
    if v.ndim == 1:
        v = v.reshape((-1,) + (1,) * (ndim - 1))
    return v


def q_sample(x0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`` for scalar or per-item ``t``."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise nx.DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ", ("x0", "eps"))
    ts = sched.check_step(t)
    dtype = x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float64
    a = _per_item(np.sqrt(sched.alpha_bar), ts, x0.ndim, dtype)
    b = _per_item(np.sqrt(1.0 - sched.alpha_bar), ts, x0.ndim, dtype)
    return a * x0 + b * eps


def to_model_space(img):
    """[0, 1] pixels to the [-1, 1] range the network is trained in."""
    return 2.0 * np.asarray(img) - 1.0


def from_model_space(x):
    return (np.asarray(x) + 1.0) / 2.0


def encode_target(noisy, clean, config: ModelConfig) -> np.ndarray:
    """Diffusion-space ``x0`` for a noisy image and its clean pair."""
    if config.target == "residual":
        return config.residual_scale * (np.asarray(noisy) - np.asarray(clean))
    return to_model_space(noisy)


def decode_target(x0, clean, config: ModelConfig) -> np.ndarray:
    """Inverse of :func:`encode_target`; no clamping."""
    if config.target == "residual":
        return np.asarray(clean) + np.asarray(x0) / config.residual_scale
    return from_model_space(x0)


@dataclass
class TrainBatch:
    """Noisy targets ``x0`` and paired clean images, both in [0, 1]."""

    x0: np.ndarray
    clean: np.ndarray
    settings: list

    def __post_init__(self):
        if self.x0.shape != self.clean.shape:
            raise nx.DimensionError(
                f"x0 {self.x0.shape} and clean {self.clean.shape} differ", ("x0", "clean")
            )
        if len(self.settings) != self.x0.shape[0]:
            raise nx.DimensionError("one CameraSettings per batch item is required", ("settings",))


def _default_model(config: ModelConfig):
    def forward(params, x_t, t, s, feats):
        return eps_theta(x_t, t, s, feats, params, config)

    return forward


def training_step(batch: TrainBatch, params: dict, config: ModelConfig, sched: DiffusionSchedule,
                  rng, loss: str = "mse", forward: Callable | None = None):
    """One stochastic evaluation of the noise-prediction objective.

    Draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` per item from ``rng``,
    builds ``x_t`` with :func:`q_sample`, and returns ``(loss, grads)``.
    ``loss`` is ``"mse"`` (mean squared error) or ``"l2"`` (root of the
    summed squares per item, averaged).  ``forward(params, x_t, t, s,
    features)`` replaces the network, mainly for tests.
    """
    rng = np.random.default_rng(rng)
    dtype = next(iter(params.values())).dtype
    x0 = encode_target(batch.x0, batch.clean, config).astype(dtype)
    s = to_model_space(batch.clean).astype(dtype)
    n = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(dtype)
    x_t = q_sample(x0, t, eps, sched).astype(dtype)
    feats = camera_features(batch.settings, config)

    tape = nx.GradTape()
    names = list(params)
    pvars = {k: tape.watch(params[k]) for k in names}
    fwd = forward or _default_model(config)
    pred = fwd(pvars, x_t, t, s, feats)
    if loss == "mse":
        objective = nx.mse_loss(pred, eps)
    elif loss == "l2":
        objective = _l2_loss(pred, eps)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    if not isinstance(objective, nx.Var):
        return float(objective), {k: np.zeros_like(v) for k, v in params.items()}
    grads = tape.gradient(objective, [pvars[k] for k in names])
    return float(objective.value), dict(zip(names, grads))


def _l2_loss(pred, target):
    p, tv = nx.value_of(pred), nx.value_of(target)
    diff = (p - tv).reshape(p.shape[0], -1)
    norms = np.sqrt(np.sum(np.square(diff, dtype=np.float64), axis=1))
    out = np.asarray(norms.mean(), dtype=p.dtype)

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        gp = (diff / safe[:, None] / p.shape[0]).reshape(p.shape) * g
        return gp.astype(p.dtype), None

    return nx._result(out, (pred, target), backward)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_update(params: dict, grads: dict, state: AdamState, lr: float = 8e-5,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam step.  Returns new ``(params, state)``; inputs are untouched."""
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        if state.m[k].shape != p.shape:
            raise nx.DimensionError(f"optimizer state for {k} has the wrong shape", (k,))
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = (p - update).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, step)


def ema_update(ema_params: dict, params: dict, decay: float = 0.995) -> dict:
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    out = {}
    for k, e in ema_params.items():
        p = params[k]
        if p.shape != e.shape:
            raise nx.DimensionError(f"ema and params differ in shape for {k}", (k,))
        if decay == 1.0:
            out[k] = e.copy()
        elif decay == 0.0:
            out[k] = p.copy()
        else:
            out[k] = (decay * e + (1.0 - decay) * p).astype(e.dtype)
    return out
