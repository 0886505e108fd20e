"""Camera-conditioned diffusion model for synthesizing realistic image noise."""

from .config import ConfigError, RunConfig, load_config
from .diffusion import DiffusionSchedule, make_beta_schedule, q_sample, training_step
from .estimator import NoiseSynthesizer, check_images, check_pair, check_settings
from .isp import BUILTIN_PROFILES, SensorProfile, get_profile, make_noisy_pair
from .metrics import AkldConfig, akld, akld_from_noise
from .model import CameraSettings, ModelConfig, eps_theta, init_params
from .samplers import dips_schedule, distill_one_step, make_plan, sample

__version__ = "0.1.0"

__all__ = [
    "AkldConfig",
    "BUILTIN_PROFILES",
    "CameraSettings",
    "ConfigError",
    "DiffusionSchedule",
    "ModelConfig",
    "NoiseSynthesizer",
    "RunConfig",
    "SensorProfile",
    "akld",
    "akld_from_noise",
    "check_images",
    "check_pair",
    "check_settings",
    "dips_schedule",
    "distill_one_step",
    "eps_theta",
    "get_profile",
    "init_params",
    "load_config",
    "make_beta_schedule",
    "make_noisy_pair",
    "make_plan",
    "q_sample",
    "sample",
    "training_step",
]
