"""Hybrid convolution-transformer classifier with meta-information tokens, on a numpy autodiff engine."""

from .errors import (CheckpointError, ConfigError, ContractError, GraphError, MetaFormerError, NumericError,
                     ShapeError, ValidationError)
from .tensor import Tensor, default_dtype, get_default_dtype, no_grad, set_default_dtype
from .meta import MetaChannel, MetaRecord, MetaSchema
from .model import PRESETS, MetaFormer, ModelConfig, StageConfig, preset
from .accounting import count_flops, count_macs, count_params
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "GraphError", "MetaFormerError", "NumericError",
    "ShapeError", "ValidationError", "Tensor", "default_dtype", "get_default_dtype", "no_grad",
    "set_default_dtype", "MetaChannel", "MetaRecord", "MetaSchema", "PRESETS", "MetaFormer", "ModelConfig",
    "StageConfig", "preset", "count_flops", "count_macs", "count_params", "load_checkpoint", "save_checkpoint",
]
