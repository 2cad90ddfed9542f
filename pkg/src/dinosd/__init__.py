"""Surround-view depth estimation with a numpy autograd engine and multiview attention."""

from .attention import MODES
from .augment import CORRUPTIONS, CorruptionSpec, corrupt, preprocess_test
from .data import MultiViewBatch, SceneConfig, make_dataset, read_dataset, write_dataset
from .evaluate import evaluate_model
from .losses import LossWeights, total_loss
from .metrics import MetricReport, compute_metrics
from .model import DinoSD, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "CORRUPTIONS",
    "MODES",
    "CorruptionSpec",
    "DinoSD",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "MultiViewBatch",
    "SceneConfig",
    "Tensor",
    "compute_metrics",
    "corrupt",
    "evaluate_model",
    "load_checkpoint",
    "make_dataset",
    "preprocess_test",
    "read_dataset",
    "save_checkpoint",
    "total_loss",
    "write_dataset",
]
