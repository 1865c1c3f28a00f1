"""Hierarchical 3D transformer (nested blocks with aggregation) for volumetric segmentation.

The package carries its own reverse-mode autodiff engine on numpy, the
encoder/decoder model, training, sliding-window inference and metrics.
"""

from .config import GeometryError, ModelConfig, TrainConfig, micro_config, scale_config
from .model import UNesT, build, count_params, estimate_flops
from .tensor import Tensor, no_grad

__all__ = [
    "GeometryError",
    "ModelConfig",
    "TrainConfig",
    "Tensor",
    "UNesT",
    "build",
    "count_params",
    "estimate_flops",
    "micro_config",
    "no_grad",
    "scale_config",
]

__version__ = "0.1.0"
