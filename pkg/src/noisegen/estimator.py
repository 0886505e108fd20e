"""scikit-learn style wrapper around training, distillation and sampling."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import io
from .config import RunConfig
from .diffusion import adam_init, make_beta_schedule
from .metrics import AkldConfig, akld_from_noise
from .model import CameraSettings, ModelConfig, VocabularyError
from .samplers import SAMPLER_KINDS, NoiseModel, distill_one_step, make_plan, sample
from .training import PairDataset, TrainState, new_state, train

__all__ = ["NoiseSynthesizer", "check_images", "check_settings", "check_pair"]


def check_images(X, name: str = "X", multiple_of: int = 4) -> np.ndarray:
    """Coerce to float32 (N, 3, H, W) in [0, 1] with H and W divisible by ``multiple_of``."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if X.shape[2] % multiple_of or X.shape[3] % multiple_of:
        raise ValueError(f"{name} spatial size {X.shape[2:]} must be divisible by {multiple_of}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or inf")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def check_settings(settings, n: int, vocab=None) -> list:
    """One :class:`CameraSettings` per image; a single value (or dict) is broadcast."""
    if isinstance(settings, (CameraSettings, dict)):
        settings = [settings] * n
    out = [s if isinstance(s, CameraSettings) else CameraSettings.from_dict(s) for s in settings]
    if len(out) != n:
        raise ValueError(f"got {len(out)} camera settings for {n} images")
    if vocab is not None:
        for s in out:
            if s.sensor_type not in vocab:
                raise VocabularyError(f"unknown sensor_type {s.sensor_type!r}; known: {list(vocab)}")
    return out


def check_pair(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X, "X")
    y = check_images(y, "y")
    if X.shape != y.shape:
        raise ValueError(f"clean {X.shape} and noisy {y.shape} shapes differ")
    return X, y


class NoiseSynthesizer(TransformerMixin, BaseEstimator):
    """Learn camera-conditioned noise from clean/noisy pairs and synthesize more.

    ``fit(X, y, settings)`` trains on clean images ``X`` and their noisy
    captures ``y``; ``transform(X, settings)`` returns synthetic noisy images;
    ``predict`` returns only the synthetic noise (``transform(X) - X``).
    When ``distill_iters > 0`` the one-step model for ``dips-advanced`` is
    distilled after training.
    """

    def __init__(self, n_steps=1000, T=200, beta_start=5e-4, beta_end=0.1, base_channels=16,
                 lr=8e-5, batch_size=16, crop=16, accumulation=2, ema_decay=0.995,
                 sampler="dips-basic", sampler_steps=5, sampler_r=5.0, truncation_N=40,
                 distill_iters=0, distill_lr=1e-4, sensor_vocab=("sensorA", "sensorB"),
                 target="image", residual_scale=1.0, use_ema=True, random_state=0):
        self.n_steps = n_steps
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.base_channels = base_channels
        self.lr = lr
        self.batch_size = batch_size
        self.crop = crop
        self.accumulation = accumulation
        self.ema_decay = ema_decay
        self.sampler = sampler
        self.sampler_steps = sampler_steps
        self.sampler_r = sampler_r
        self.truncation_N = truncation_N
        self.distill_iters = distill_iters
        self.distill_lr = distill_lr
        self.sensor_vocab = sensor_vocab
        self.target = target
        self.residual_scale = residual_scale
        self.use_ema = use_ema
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        if self.sampler not in SAMPLER_KINDS:
            raise ValueError(f"sampler must be one of {SAMPLER_KINDS}, got {self.sampler!r}")
        if not isinstance(self.n_steps, (int, np.integer)) or self.n_steps < 0:
            raise ValueError("n_steps must be a non-negative integer")
        seed = 0 if self.random_state is None else int(self.random_state)
        return RunConfig(
            T=self.T, beta_start=self.beta_start, beta_end=self.beta_end,
            model=ModelConfig(base_channels=self.base_channels, sensor_vocab=tuple(self.sensor_vocab),
                              target=self.target, residual_scale=self.residual_scale),
            lr=self.lr, accumulation=self.accumulation, batch_size=self.batch_size, crop=self.crop,
            ema_decay=self.ema_decay, sampler_S=self.sampler_steps, sampler_r=self.sampler_r,
            truncation_N=self.truncation_N, distill_lr=self.distill_lr, seed=seed,
        )

    def fit(self, X, y, settings=None):
        X, y = check_pair(X, y)
        cfg = self._run_config()
        if settings is None:
            raise ValueError("fit needs camera settings for every image pair")
        settings = check_settings(settings, len(X), cfg.model.sensor_vocab)
        data = PairDataset(X, y, settings)
        state = new_state(cfg)
        train(state, data, cfg, self.n_steps)
        self.config_ = cfg
        self._set_state(state)
        self.psi_ = None
        if self.distill_iters:
            self.distill(X, y, settings)
        return self

    def partial_fit(self, X, y, settings=None, n_steps=None):
        """Continue training for ``n_steps`` (default ``self.n_steps``) updates."""
        if not hasattr(self, "state_"):
            saved, self.n_steps = self.n_steps, n_steps if n_steps is not None else self.n_steps
            try:
                return self.fit(X, y, settings)
            finally:
                self.n_steps = saved
        X, y = check_pair(X, y)
        settings = check_settings(settings, len(X), self.config_.model.sensor_vocab)
        train(self.state_, PairDataset(X, y, settings), self.config_,
              self.n_steps if n_steps is None else n_steps)
        self._set_state(self.state_)
        return self

    def _set_state(self, state: TrainState) -> None:
        self.state_ = state
        self.params_ = state.params
        self.ema_ = state.ema
        self.n_iter_ = state.step
        self.schedule_ = make_beta_schedule("linear", self.config_.T, self.config_.beta_start,
                                            self.config_.beta_end)

    def distill(self, X, y, settings, iters=None):
        check_is_fitted(self, "state_")
        X, y = check_pair(X, y)
        settings = check_settings(settings, len(X), self.config_.model.sensor_vocab)
        data = PairDataset(X, y, settings)
        cfg = self.config_
        self.distill_losses_ = []
        self.psi_ = distill_one_step(
            self._model(), self.schedule_, cfg.truncation_N,
            lambda rng, bs: data.batch(rng, bs, cfg.crop),
            np.random.default_rng([cfg.seed, 7]), self.distill_iters if iters is None else iters,
            lr=cfg.distill_lr, batch_size=cfg.batch_size, log=self.distill_losses_,
        )
        return self

    def _model(self) -> NoiseModel:
        return NoiseModel(self.ema_ if self.use_ema else self.params_, self.config_.model)

    def transform(self, X, settings=None, seed=None):
        check_is_fitted(self, "state_")
        X = check_images(X)
        if settings is None:
            raise ValueError("transform needs camera settings")
        settings = check_settings(settings, len(X), self.config_.model.sensor_vocab)
        cfg = self.config_
        plan = make_plan(self.sampler, cfg.T, self.sampler_steps, self.sampler_r, self.truncation_N)
        psi = None
        if plan.kind == "dips-advanced":
            if getattr(self, "psi_", None) is None:
                raise ValueError("dips-advanced needs a distilled model; set distill_iters or call distill()")
            psi = NoiseModel(self.psi_, cfg.model)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        return sample(self._model(), plan, X, settings, self.schedule_, rng, psi=psi)

    def fit_transform(self, X, y=None, settings=None, seed=None):
        return self.fit(X, y, settings).transform(X, settings, seed)

    def predict(self, X, settings=None, seed=None):
        return self.transform(X, settings, seed) - check_images(X)

    def score(self, X, y, settings=None, samples_per_image: int = 1):
        """Negative AKLD of synthetic noise against the real noise in ``y`` (higher is better)."""
        X, y = check_pair(X, y)
        gens = [self.transform(X, settings, seed=[self.config_.seed, k]) - X for k in range(samples_per_image)]
        real = y.astype(np.float64) - X
        vals = [akld_from_noise(real[i], [g[i] for g in gens], AkldConfig()) for i in range(len(X))]
        return -float(np.mean(vals))

    def save(self, path) -> None:
        check_is_fitted(self, "state_")
        st = self.state_
        io.save_checkpoint(path, io.Checkpoint(self.config_, st.params, st.ema, getattr(self, "psi_", None),
                                               st.adam, st.step, st.seed))

    @classmethod
    def load(cls, path, **overrides) -> "NoiseSynthesizer":
        ck = io.load_checkpoint(path)
        c = ck.config
        est = cls(T=c.T, beta_start=c.beta_start, beta_end=c.beta_end, base_channels=c.model.base_channels,
                  lr=c.lr, batch_size=c.batch_size, crop=c.crop, accumulation=c.accumulation,
                  ema_decay=c.ema_decay, sampler_steps=c.sampler_S, sampler_r=c.sampler_r,
                  truncation_N=c.truncation_N, distill_lr=c.distill_lr,
                  sensor_vocab=c.model.sensor_vocab, target=c.model.target,
                  residual_scale=c.model.residual_scale, random_state=c.seed)
        est.set_params(**overrides)
        est.config_ = c
        ema = ck.ema if ck.ema is not None else ck.params
        adam = ck.adam if ck.adam is not None else adam_init(ck.params)
        est._set_state(TrainState(ck.params, ema, adam, ck.step, ck.seed))
        est.psi_ = ck.psi
        return est
