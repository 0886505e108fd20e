"""Reverse-process samplers and one-step distillation.

Four plan kinds share one loop:

``ancestral``
    every step ``T..1`` with posterior noise (DDPM).
``uniform``
    ``S`` evenly spaced steps with deterministic jumps (DDIM, eta = 0).
``dips-basic``
    exponentially spaced steps that crowd near the data end.
``dips-advanced``
    a distilled one-step model moves ``x_T`` to a truncation step ``N``;
    the trained model then follows an exponential plan from ``N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .diffusion import (
    DiffusionSchedule,
    TrainBatch,
    adam_init,
    adam_update,
    decode_target,
    encode_target,
    q_sample,
    to_model_space,
)
from .metrics import AkldConfig, akld_from_noise
from .model import ModelConfig, camera_features, eps_theta, mcam_features

__all__ = [
    "SAMPLER_KINDS",
    "SamplerPlan",
    "NoiseModel",
    "dips_schedule",
    "uniform_schedule",
    "ancestral_plan",
    "make_plan",
    "predict_x0",
    "deterministic_jump",
    "ancestral_step",
    "sample",
    "distill_one_step",
    "akld_trajectory",
]

SAMPLER_KINDS = ("ancestral", "uniform", "dips-basic", "dips-advanced")


@dataclass(frozen=True)
class SamplerPlan:
    kind: str
    steps: tuple
    T: int
    S: int
    r: float = 0.0
    N: int | None = None
    t_last: int | None = None

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; choose from {SAMPLER_KINDS}")
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if steps[-1] != 0:
            raise ValueError("plan must end at step 0")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError(f"plan steps must be strictly decreasing: {steps}")
        if steps[0] > self.T or steps[-1] < 0:
            raise ValueError(f"plan steps must lie in [0, {self.T}]")

    @property
    def n_model_evals(self) -> int:
        return len(self.steps) - 1


# ---------------------------------------------------------------------------
# schedules


def last_step(S: int) -> float:
    """Unrounded terminal step ``10 / ln S``."""
    return 10.0 / math.log(S)


def dips_schedule(start: int, S: int, r: float = 5.0, kind: str = "dips-basic",
                  T: int | None = None) -> SamplerPlan:
    """Exponentially spaced descending steps from ``start`` to ``floor(10 / ln S)``.

    ``t_i = floor(t_last + (start - t_last) * (exp(r (i-1)/(S-1)) - 1) / (exp(r) - 1))``
    for ``i = S..1`` with ``t_last = 10 / ln S``, then a terminal 0.  As
    ``r -> 0`` the spacing becomes linear.  Entries that coincide after
    flooring are merged so the plan stays strictly decreasing.
    """
    if S < 2:
        raise ValueError(f"S must be at least 2, got {S}")
    if r < 0:
        raise ValueError(f"r must be non-negative, got {r}")
    t_last = last_step(S)
    if start <= t_last:
        raise ValueError(f"start step {start} must exceed t_last = {t_last:.3f} for S = {S}")
    steps = []
    for i in range(S, 0, -1):
        u = (i - 1) / (S - 1)
        frac = math.expm1(r * u) / math.expm1(r) if r > 1e-12 else u
        t = math.floor(t_last + (start - t_last) * frac + 1e-9)
        if not steps or t < steps[-1]:
            steps.append(t)
    steps.append(0)
    if kind == "dips-basic":
        T = start if T is None else T
        if start != T:
            raise ValueError("dips-basic plans start at T")
        return SamplerPlan("dips-basic", tuple(steps), T, S, r, None, math.floor(t_last))
    if kind == "dips-advanced":
        if T is None or start >= T:
            raise ValueError("dips-advanced needs a truncation step N < T")
        return SamplerPlan("dips-advanced", tuple(steps), T, S, r, start, math.floor(t_last))
    raise ValueError(f"dips_schedule kind must be dips-basic or dips-advanced, got {kind!r}")


def uniform_schedule(T: int, S: int) -> SamplerPlan:
    if S < 1:
        raise ValueError("S must be at least 1")
    if S > T:
        raise ValueError(f"S = {S} exceeds T = {T}")
    steps = tuple(int(round(T - k * T / S)) for k in range(S)) + (0,)
    return SamplerPlan("uniform", steps, T, S)


def ancestral_plan(T: int) -> SamplerPlan:
    return SamplerPlan("ancestral", tuple(range(T, -1, -1)), T, T)


def make_plan(kind: str, T: int, S: int | None = None, r: float = 5.0, N: int | None = None) -> SamplerPlan:
    if kind == "ancestral":
        return ancestral_plan(T)
    if kind == "uniform":
        return uniform_schedule(T, S)
    if kind == "dips-basic":
        return dips_schedule(T, S, r, "dips-basic", T)
    if kind == "dips-advanced":
        return dips_schedule(N, S, r, "dips-advanced", T)
    raise ValueError(f"unknown sampler kind {kind!r}; choose from {SAMPLER_KINDS}")


# ---------------------------------------------------------------------------
# single transitions


def _coef(table: np.ndarray, t, like: np.ndarray):
    v = np.asarray(table[t], dtype=like.dtype)
    return v.reshape((-1,) + (1,) * (like.ndim - 1)) if v.ndim == 1 else v


def predict_x0(x_t, t, eps_hat, sched: DiffusionSchedule) -> np.ndarray:
    """``(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)``."""
    sched.check_step(t, low=1)
    x_t = np.asarray(x_t)
    a = _coef(np.sqrt(sched.alpha_bar), t, x_t)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar), t, x_t)
    return (x_t - b * eps_hat) / a


def deterministic_jump(x_t, t: int, t_next: int, eps_hat, sched: DiffusionSchedule) -> np.ndarray:
    """DDIM (eta = 0) move from ``t`` to ``t_next``; returns the x0 estimate at ``t_next = 0``."""
    if not 0 <= t_next <= t:
        raise ValueError(f"need 0 <= t_next <= t, got t={t}, t_next={t_next}")
    if t_next == t:
        return np.array(x_t, copy=True)
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    if t_next == 0:
        return x0_hat
    x_t = np.asarray(x_t)
    a = x_t.dtype.type(math.sqrt(sched.alpha_bar[t_next]))
    b = x_t.dtype.type(math.sqrt(1.0 - sched.alpha_bar[t_next]))
    return a * x0_hat + b * eps_hat


def ancestral_step(x_t, t: int, eps_hat, sched: DiffusionSchedule, rng) -> np.ndarray:
    """One DDPM reverse step with posterior variance; no noise is added at ``t = 1``."""
    sched.check_step(t, low=1)
    x_t = np.asarray(x_t)
    dt = x_t.dtype.type
    mean = (x_t - dt(sched.beta[t] / math.sqrt(1.0 - sched.alpha_bar[t])) * eps_hat) / dt(
        math.sqrt(sched.alpha[t])
    )
    if t > 1:
        z = rng.standard_normal(x_t.shape).astype(x_t.dtype)
        mean = mean + dt(math.sqrt(sched.posterior_var[t])) * z
    return mean


# ---------------------------------------------------------------------------
# sampling loop


@dataclass
class NoiseModel:
    """Parameters plus architecture; callable as ``model(x_t, t, settings, clean_features)``."""

    params: dict
    config: ModelConfig
    n_evals: int = field(default=0, compare=False)

    def clean_features(self, s_model):
        return mcam_features(s_model, self.params)

    def __call__(self, x_t, t, settings, clean_features):
        self.n_evals += 1
        n = x_t.shape[0]
        return eps_theta(x_t, np.full(n, int(t)), None, settings, self.params, self.config,
                         clean_features=clean_features)


def _as_model(model, config: ModelConfig | None) -> NoiseModel:
    if not isinstance(model, dict):
        return model  # NoiseModel or anything with the same call surface
    if config is None:
        raise ValueError("a ModelConfig is required when passing raw parameters")
    return NoiseModel(model, config)


def _settings_matrix(settings, n: int, config: ModelConfig) -> np.ndarray:
    if isinstance(settings, np.ndarray):
        feats = np.atleast_2d(settings)
    else:
        feats = np.atleast_2d(camera_features(settings, config))
    if feats.shape[0] == 1 and n > 1:
        feats = np.repeat(feats, n, axis=0)
    if feats.shape[0] != n:
        raise nx.DimensionError(f"{feats.shape[0]} camera settings for {n} images", ("cs",))
    return feats


def sample(model, plan: SamplerPlan, s, settings, sched: DiffusionSchedule, rng, psi=None,
           config: ModelConfig | None = None, callback: Callable | None = None) -> np.ndarray:
    """Generate noisy images for clean images ``s`` (N, 3, H, W) in [0, 1].

    ``settings`` is one :class:`CameraSettings` (broadcast) or one per image.
    ``psi`` is the distilled one-step model, required for ``dips-advanced``.
    ``callback(t, x_t, eps_hat)`` is invoked after every model evaluation.
    The result is clamped to [0, 1] only at the end.
    """
    if plan.T != sched.T:
        raise ValueError(f"plan built for T={plan.T} but schedule has T={sched.T}")
    model = _as_model(model, config)
    rng = np.random.default_rng(rng)
    dtype = next(iter(model.params.values())).dtype
    s_model = to_model_space(s).astype(dtype)
    n = s_model.shape[0]
    feats = _settings_matrix(settings, n, model.config)
    clean_feats = model.clean_features(s_model)
    x = rng.standard_normal(s_model.shape).astype(dtype)

    steps = plan.steps
    if plan.kind == "dips-advanced":
        if psi is None:
            raise ValueError("dips-advanced sampling needs the distilled one-step model (psi)")
        psi = _as_model(psi, model.config)
        eps = psi(x, plan.N, feats, psi.clean_features(s_model))
        if callback is not None:
            callback(plan.T, x, eps)
        x = deterministic_jump(x, plan.T, plan.N, eps, sched).astype(dtype)

    for t, t_next in zip(steps[:-1], steps[1:]):
        eps = model(x, t, feats, clean_feats)
        if callback is not None:
            callback(t, x, eps)
        if plan.kind == "ancestral":
            x = ancestral_step(x, t, eps, sched, rng)
        else:
            x = deterministic_jump(x, t, t_next, eps, sched)
        x = x.astype(dtype, copy=False)
    return np.clip(decode_target(x, s, model.config), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# distillation


def distill_one_step(teacher, sched: DiffusionSchedule, N: int, data, rng, iters: int,
                     config: ModelConfig | None = None, lr: float = 1e-4, batch_size: int = 16,
                     log: list | None = None) -> dict:
    """Distil ``psi(x_T, N)`` onto the frozen teacher's ``eps(x_N, N)``.

    ``x_T`` and ``x_N`` are forward samples of the same ``x0`` with the same
    ``eps``.  ``data(rng, batch_size)`` returns a :class:`TrainBatch`.
    ``psi`` starts as a copy of the teacher; the teacher is never modified.
    Per-iteration losses are appended to ``log`` when given.
    """
    teacher = _as_model(teacher, config)
    if not 1 <= N < sched.T:
        raise ValueError(f"need 1 <= N < T, got N={N}, T={sched.T}")
    rng = np.random.default_rng(rng)
    cfg = teacher.config
    psi = {k: v.copy() for k, v in teacher.params.items()}
    state = adam_init(psi)
    names = list(psi)
    for _ in range(iters):
        batch: TrainBatch = data(rng, batch_size)
        dtype = psi[names[0]].dtype
        x0 = encode_target(batch.x0, batch.clean, cfg).astype(dtype)
        s = to_model_space(batch.clean).astype(dtype)
        eps = rng.standard_normal(x0.shape).astype(dtype)
        x_T = q_sample(x0, sched.T, eps, sched).astype(dtype)
        x_N = q_sample(x0, N, eps, sched).astype(dtype)
        feats = camera_features(batch.settings, cfg)
        t_vec = np.full(x0.shape[0], N)
        target = eps_theta(x_N, t_vec, s, feats, teacher.params, cfg)

        tape = nx.GradTape()
        pvars = {k: tape.watch(psi[k]) for k in names}
        pred = eps_theta(x_T, t_vec, s, feats, pvars, cfg)
        loss = nx.mse_loss(pred, target)
        grads = dict(zip(names, tape.gradient(loss, [pvars[k] for k in names])))
        psi, state = adam_update(psi, grads, state, lr=lr)
        if log is not None:
            log.append(float(loss.value))
    return psi


# ---------------------------------------------------------------------------
# diagnostics


def akld_trajectory(model, sched: DiffusionSchedule, eval_set, probe_steps: Sequence[int], rng,
                    config: ModelConfig | None = None, akld_cfg=None) -> list[tuple[int, float]]:
    """AKLD of the running x0 estimate at each probe step of one ancestral run.

    ``eval_set`` is ``(clean, real_noisy, settings)`` with batched images.
    """
    akld_cfg = akld_cfg or AkldConfig()
    probes = [int(p) for p in probe_steps]
    if any(a <= b for a, b in zip(probes, probes[1:])):
        raise ValueError("probe_steps must be strictly descending")
    clean, real_noisy, settings = eval_set
    clean = np.asarray(clean, dtype=np.float32)
    model = _as_model(model, config)
    model_cfg = model.config
    wanted = set(p for p in probes if p > 0)
    snaps: dict[int, np.ndarray] = {}

    def grab(t, x_t, eps):
        if t in wanted:
            x0 = predict_x0(x_t, t, eps, sched)
            snaps[t] = np.clip(decode_target(x0, clean, model_cfg), 0.0, 1.0)

    final = sample(model, ancestral_plan(sched.T), clean, settings, sched, rng,
                   config=config, callback=grab)
    if 0 in probes:
        snaps[0] = final
    real = np.asarray(real_noisy, dtype=np.float64) - clean
    out = []
    for p in probes:
        gen = snaps[p].astype(np.float64) - clean
        vals = [akld_from_noise(real[i], [gen[i]], akld_cfg) for i in range(clean.shape[0])]
        out.append((p, float(np.mean(vals))))
    return out
