"""Desk-scale 3D scene question answering: point clouds in, answers out."""
from .compressor import Compressor, CompressorConfig
from .encoder import ConfigError, EncoderConfig, SpatialEncoder
from .lm import LMConfig, PrefixLM, Vocabulary
from .model import ModelConfig, SceneQAModel, preset
from .tensor import NumericalError, Tensor

__version__ = "0.1.0"

__all__ = [
    "Compressor", "CompressorConfig", "ConfigError", "EncoderConfig", "LMConfig", "ModelConfig",
    "NumericalError", "PrefixLM", "SceneQAModel", "SpatialEncoder", "Tensor", "Vocabulary", "preset",
]
