"""Prompted contrastive plus masked-motion pretraining for skeleton sequences, in numpy.

Modules: ``tensor`` (autodiff), ``data``, ``augment``, ``model``, ``losses``,
``trainer``, ``evaluation``, ``verify`` and ``cli``.
"""

from .data import LabeledDataset, SynthConfig, generate_synthetic
from .errors import (CapabilityError, ConfigError, ContractError, FormatError, NumericDomainError,
                     ShapeError)
from .model import ModelConfig, PCM3Model
from .trainer import MODES, TrainConfig, pretrain

__version__ = "0.1.0"

__all__ = [
    "CapabilityError", "ConfigError", "ContractError", "FormatError", "LabeledDataset", "MODES",
    "ModelConfig", "NumericDomainError", "PCM3Model", "ShapeError", "SynthConfig", "TrainConfig",
    "generate_synthetic", "pretrain",
]
