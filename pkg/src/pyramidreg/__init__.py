"""Coarse-to-fine deformable 3D image registration with adaptive iteration."""

from .autodiff import Tensor, no_grad
from .config import RunConfig
from .fields import DeformationField
from .model import ModelConfig, init_params, register_pair

__all__ = [
    "Tensor",
    "no_grad",
    "RunConfig",
    "DeformationField",
    "ModelConfig",
    "init_params",
    "register_pair",
]

__version__ = "0.1.0"
