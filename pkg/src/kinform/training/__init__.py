"""Multi-task training: configuration, model, loss, optimizer loop and checkpoints."""

from .augment import AugmentParams, apply_augmentation, augment, draw_params
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, dump_config, load_config, parse_config_text
from .model import KinshipModel, best_threshold, cosine_scores
from .trainer import (
    METRIC_FIELDS,
    Batch,
    LossBreakdown,
    TrainResult,
    TrainingDiverged,
    epoch_samples,
    make_batch,
    metrics_to_csv,
    model_from_checkpoint,
    route_mask,
    total_loss,
    train,
)

__all__ = [
    "AugmentParams",
    "Batch",
    "Checkpoint",
    "ConfigError",
    "KinshipModel",
    "LossBreakdown",
    "METRIC_FIELDS",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "apply_augmentation",
    "augment",
    "best_threshold",
    "cosine_scores",
    "draw_params",
    "dump_config",
    "epoch_samples",
    "load_checkpoint",
    "load_config",
    "make_batch",
    "metrics_to_csv",
    "model_from_checkpoint",
    "parse_config_text",
    "route_mask",
    "save_checkpoint",
    "total_loss",
    "train",
]
