"""Multi-exit CNN toolkit.

Turns a group-wise backbone into a multi-classifier network by sampled
branch augmentation, trains every classifier jointly with a mutual
self-distillation objective, and serves budget-aware early-exit
inference with per-classifier diagnostics.
"""

from .backend import BACKEND
from .data import AugmentConfig, Dataset, augment, batch_iter, load_cifar_binary, synth_dataset
from .losses import LossBreakdown, LossConfig, beta_schedule, feature_loss, kd_loss, label_loss, total_loss
from .network import (
    BackboneSpec,
    GroupSpec,
    MultiExitNetwork,
    StemSpec,
    ValidationError,
    augment_with_branches,
    build_backbone,
    build_from_config,
)
from .runtime import EvalReport, ExitPolicy, budget_curve, ensemble_predict, evaluate_per_classifier, predict_early_exit
from .tensor import Tape, Tensor, backward
from .train import TrainConfig, TrainState, fit, sgd_update, train_epoch

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AugmentConfig", "Dataset", "augment", "batch_iter", "load_cifar_binary", "synth_dataset",
    "LossBreakdown", "LossConfig", "beta_schedule", "feature_loss", "kd_loss", "label_loss", "total_loss",
    "BackboneSpec", "GroupSpec", "MultiExitNetwork", "StemSpec", "ValidationError",
    "augment_with_branches", "build_backbone", "build_from_config",
    "EvalReport", "ExitPolicy", "budget_curve", "ensemble_predict",
    "evaluate_per_classifier", "predict_early_exit",
    "Tape", "Tensor", "backward",
    "TrainConfig", "TrainState", "fit", "sgd_update", "train_epoch",
    "__version__",
]
