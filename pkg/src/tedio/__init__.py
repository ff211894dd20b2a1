"""Temporal-diagonal latent optimization for a toy video diffusion transformer."""

from .config import ModelConfig, RunConfig, ScheduleConfig, TedioConfig, TrainConfig
from .diffusion import NoiseSchedule, denoise_step, sample, train
from .model import DiT, init_params, load_checkpoint, save_checkpoint
from .temporal import latent_refine, tedio_loss, temporal_attention, variability_score

__all__ = [
    "ModelConfig", "RunConfig", "ScheduleConfig", "TedioConfig", "TrainConfig",
    "NoiseSchedule", "denoise_step", "sample", "train",
    "DiT", "init_params", "load_checkpoint", "save_checkpoint",
    "latent_refine", "tedio_loss", "temporal_attention", "variability_score",
]
