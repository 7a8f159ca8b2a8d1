from .model import (AttentionCapture, AttentionSite, HookShapeError, ModelConfig, StepContext,
                    ToyRestorer, list_attention_sites)
from .sampler import denoise_step, initial_noise, predict_noise, sample
from .schedule import NoiseSchedule

__all__ = [
    "AttentionCapture", "AttentionSite", "HookShapeError", "ModelConfig", "NoiseSchedule",
    "StepContext", "ToyRestorer", "denoise_step", "initial_noise", "list_attention_sites",
    "predict_noise", "sample",
]
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .degrade import DegradationConfig, degrade
from .train import TrainConfig, TrainResult, build_model, train

__all__ += [
    "CheckpointError", "DegradationConfig", "TrainConfig", "TrainResult", "build_model",
    "degrade", "load_checkpoint", "save_checkpoint", "train",
]
