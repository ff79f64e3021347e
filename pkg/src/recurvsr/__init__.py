"""Recurrent conditional diffusion for enhancing low-resolution face videos."""

from .data import VideoClip
from .denoiser import ConditionalUNet, ConditioningBundle, DenoiserConfig, denoise_step, encode_expression
from .diffusion import NoiseSchedule, build_schedule, diffuse_pair, forward_diffuse, posterior_params
from .inference import infer_frame, infer_video
from .training import TrainConfig, Trainer, train, train_step

__version__ = "0.1.0"
