"""Training loop: Adam with gradient accumulation and an EMA copy.

Step ``k`` draws all of its randomness from ``default_rng([seed, k])``, so a
run resumed from a checkpoint at step ``k`` continues exactly as an
uninterrupted run would.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .diffusion import AdamState, TrainBatch, adam_init, adam_update, ema_update, make_beta_schedule, training_step
from .model import CameraSettings, check_params, init_params

__all__ = ["PairDataset", "TrainState", "new_state", "train"]

log = logging.getLogger(__name__)


@dataclass
class PairDataset:
    """In-memory clean/noisy pairs with per-image camera settings."""

    clean: np.ndarray
    noisy: np.ndarray
    settings: list

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float32)
        self.noisy = np.asarray(self.noisy, dtype=np.float32)
        if self.clean.shape != self.noisy.shape or self.clean.ndim != 4:
            raise ValueError(f"clean {self.clean.shape} and noisy {self.noisy.shape} must be equal (N, C, H, W)")
        if len(self.settings) != len(self.clean):
            raise ValueError("one CameraSettings per image is required")
        if len(self.clean) == 0:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return len(self.clean)

    def batch(self, rng, batch_size: int, crop: int | None = None) -> TrainBatch:
        idx = rng.integers(0, len(self), size=batch_size)
        h, w = self.clean.shape[2:]
        crop = min(crop or h, h, w)
        ys = rng.integers(0, h - crop + 1, size=batch_size)
        xs = rng.integers(0, w - crop + 1, size=batch_size)
        clean = np.stack([self.clean[i, :, y:y + crop, x:x + crop] for i, y, x in zip(idx, ys, xs)])
        noisy = np.stack([self.noisy[i, :, y:y + crop, x:x + crop] for i, y, x in zip(idx, ys, xs)])
        return TrainBatch(noisy, clean, [self.settings[i] for i in idx])


@dataclass
class TrainState:
    params: dict
    ema: dict
    adam: AdamState
    step: int = 0
    seed: int = 0
    losses: list = field(default_factory=list)


def new_state(cfg: RunConfig) -> TrainState:
    params = init_params(cfg.model, np.random.default_rng([cfg.seed, 2**31 - 1]))
    return TrainState(
        params=params,
        ema={k: v.copy() for k, v in params.items()},
        adam=adam_init(params),
        step=0,
        seed=cfg.seed,
    )


def train(state: TrainState, data: PairDataset, cfg: RunConfig, steps: int,
          callback: Callable[[TrainState], None] | None = None, every: int = 0) -> TrainState:
    """Run ``steps`` optimizer updates in place and return ``state``.

    Each update averages ``cfg.accumulation`` micro-batch gradients.
    ``callback`` runs every ``every`` updates (checkpointing, logging).
    """
    check_params(state.params, cfg.model)
    sched = make_beta_schedule("linear", cfg.T, cfg.beta_start, cfg.beta_end)
    for _ in range(steps):
        rng = np.random.default_rng([state.seed, state.step])
        total, acc = 0.0, None
        for _ in range(cfg.accumulation):
            batch = data.batch(rng, cfg.batch_size, cfg.crop)
            loss, grads = training_step(batch, state.params, cfg.model, sched, rng, loss=cfg.loss)
            total += loss
            if acc is None:
                acc = grads
            else:
                acc = {k: acc[k] + grads[k] for k in acc}
        acc = {k: g / cfg.accumulation for k, g in acc.items()}
        mean_loss = total / cfg.accumulation
        if not math.isfinite(mean_loss):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        state.params, state.adam = adam_update(state.params, acc, state.adam, cfg.lr, cfg.adam_betas)
        state.ema = ema_update(state.ema, state.params, cfg.ema_decay)
        state.step += 1
        state.losses.append(mean_loss)
        if callback is not None and every and state.step % every == 0:
            callback(state)
    return state
