"""Masked-patch contrastive pretraining with attention pooling, and
finetuning via block-wise weight transfer."""

from .autodiff import EVAL, TRAIN, Tape, Tensor, backward
from .config import ExperimentConfig
from .data import Dataset, make_synthetic_jigsaw, read_cifar10_binary, subset_split
from .errors import (CheckpointError, ConfigError, DataFormatError, ShapeError,
                     TrainingDiverged)
from .model import (ClassifierConfig, ModelConfig, classifier_forward,
                    init_classifier, init_pretrain_model, pretrain_forward)
from .params import ParamStore
from .rng import RngStream
from .train import run_finetune, run_pretrain, transfer_weights

__version__ = "0.1.0"

__all__ = [
    "EVAL", "TRAIN", "Tape", "Tensor", "backward",
    "ExperimentConfig",
    "Dataset", "make_synthetic_jigsaw", "read_cifar10_binary", "subset_split",
    "CheckpointError", "ConfigError", "DataFormatError", "ShapeError",
    "TrainingDiverged",
    "ClassifierConfig", "ModelConfig", "classifier_forward", "init_classifier",
    "init_pretrain_model", "pretrain_forward",
    "ParamStore", "RngStream",
    "run_finetune", "run_pretrain", "transfer_weights",
    "__version__",
]
