"""Tumor-aware vision transformer for contrast-enhanced MRI synthesis, in numpy."""

from .models import ModelConfig, build_latent_encoder, build_mprvit, build_tavit, extract_latent
from .nn import TransformerConfig
from .tensor import Tensor, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "TransformerConfig",
    "build_latent_encoder",
    "build_mprvit",
    "build_tavit",
    "extract_latent",
]
