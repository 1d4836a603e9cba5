"""Optimization, training loop, evaluation, persistence and reporting."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .metrics import accuracy, confusion_2x2, matthews_corr, spearman_corr
from .optim import AdamState, adam_step, lr_at
from .train import MetricsReport, TrainConfig, evaluate, make_batch, predict, prepare_data, train

__all__ = [
    "AdamState", "Checkpoint", "MetricsReport", "TrainConfig", "accuracy", "adam_step",
    "confusion_2x2", "evaluate", "load_checkpoint", "lr_at", "make_batch", "matthews_corr",
    "predict", "prepare_data", "save_checkpoint", "spearman_corr", "train",
]
