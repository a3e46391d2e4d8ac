"""Spot-level gene expression prediction from slide image features.

Three encoders (target patch tokens, a neighbor grid, the whole slide) are
fused by cross-attention; every layer runs on the small reverse-mode autodiff
core in :mod:`triplex.tensor`.
"""
from .config import RunConfig, load_config
from .data import FeatureSet, SlideDataset, load_dataset
from .encoders import EncoderConfig
from .evaluation import MetricsReport, aggregate_metrics, make_grouped_kfold, make_lopcv_folds
from .model import TriplexModel, load_checkpoint, save_checkpoint
from .tensor import Tensor, grad_check
from .training import TrainConfig, fit, lr_schedule

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "FeatureSet",
    "MetricsReport",
    "RunConfig",
    "SlideDataset",
    "Tensor",
    "TrainConfig",
    "TriplexModel",
    "aggregate_metrics",
    "fit",
    "grad_check",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "lr_schedule",
    "make_grouped_kfold",
    "make_lopcv_folds",
    "save_checkpoint",
]
