"""FSPNet at desk scale: numpy autodiff, ViT encoder, NL-TEM, shrinkage decoder, COD metrics."""

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, ModelConfig, toy_config
from .data import DataError, Dataset, gen_synthetic
from .fsd import build_schedule
from .loss import total_loss
from .metrics import MetricReport, evaluate_dataset
from .model import FSPNet
from .tensor import Tensor, no_grad
from .train import DivergenceError, evaluate, predict, train

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Dataset",
    "DivergenceError",
    "FSPNet",
    "MetricReport",
    "ModelConfig",
    "Tensor",
    "build_schedule",
    "evaluate",
    "evaluate_dataset",
    "gen_synthetic",
    "no_grad",
    "predict",
    "toy_config",
    "total_loss",
    "train",
]

__version__ = "0.1.0"
