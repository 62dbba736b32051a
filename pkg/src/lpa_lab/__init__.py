"""Learned class-level activation perturbation for small MLPs."""

from .data import Dataset, DatasetSpec, make_splits
from .estimator import LPAClassifier
from .exceptions import ConfigError, DimensionError, EmptyClassError, InvariantViolation, LPAError
from .net import MlpNetwork, forward_from, forward_full, load_checkpoint, save_checkpoint
from .perturb import PgdConfig, Sign
from .schedule import BoundConfig, LayerChoice, Mode
from .train import CE, LPA, LPL, Adversarial, Dropout, LPLPlusLPA, ManifoldMixup, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Adversarial",
    "BoundConfig",
    "CE",
    "ConfigError",
    "Dataset",
    "DatasetSpec",
    "DimensionError",
    "Dropout",
    "EmptyClassError",
    "InvariantViolation",
    "LPA",
    "LPAClassifier",
    "LPAError",
    "LPL",
    "LPLPlusLPA",
    "LayerChoice",
    "ManifoldMixup",
    "MlpNetwork",
    "Mode",
    "PgdConfig",
    "Sign",
    "TrainConfig",
    "forward_from",
    "forward_full",
    "load_checkpoint",
    "make_splits",
    "save_checkpoint",
]
