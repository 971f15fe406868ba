"""Hierarchical vision transformer with scale/patch dual attention,
built on a minimal reverse-mode autodiff core."""

from .config import DuoFormerConfig, TrainConfig, parse_config, serialize_config
from .errors import (ConfigError, ContractError, DimensionError, DuoformerError,
                     FormatError, NumericError)
from .model import DuoFormer, count_parameters, load_checkpoint, save_checkpoint
from .tensor import Tensor

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "DuoformerError",
    "DuoFormer", "DuoFormerConfig", "FormatError", "NumericError",
    "Tensor", "TrainConfig", "count_parameters", "load_checkpoint",
    "parse_config", "save_checkpoint", "serialize_config",
]

__version__ = "0.1.0"
