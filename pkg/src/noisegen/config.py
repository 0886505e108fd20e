"""Run configuration shared by the CLI, the estimator and the tests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .metrics import AkldConfig
from .model import ModelConfig

__all__ = ["RunConfig", "ConfigError", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run.

    The defaults are the desk-scale setting: 200 diffusion steps with the
    usual 1e-4..0.02 linear betas rescaled by 1000/T so the chain still ends
    near pure noise, 16x16 crops, batches of 16, two accumulated
    micro-batches per update and EMA decay 0.995.
    """

    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 8e-5
    adam_betas: tuple = (0.9, 0.999)
    accumulation: int = 2
    batch_size: int = 16
    crop: int = 16
    ema_decay: float = 0.995
    loss: str = "mse"
    sampler_S: int = 5
    sampler_r: float = 5.0
    truncation_N: int = 40
    distill_lr: float = 1e-4
    akld: AkldConfig = field(default_factory=AkldConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        for name in ("T", "accumulation", "batch_size", "crop", "sampler_S", "truncation_N"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.sampler_S < 2:
            raise ConfigError("sampler_S must be at least 2 for DIPS plans")
        if self.truncation_N >= self.T:
            raise ConfigError("truncation_N must be below T")
        if self.crop % 4:
            raise ConfigError("crop must be divisible by 4")
        if self.loss not in ("mse", "l2"):
            raise ConfigError(f"loss must be 'mse' or 'l2', got {self.loss!r}")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.lr <= 0 or self.distill_lr <= 0:
            raise ConfigError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "akld" in d:
                d["akld"] = AkldConfig(**d["akld"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            return RunConfig.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
