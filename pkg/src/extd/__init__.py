"""Iterative weight-shared multi-scale face detector, self-contained:
differentiable NCHW kernels, anchor matching, training, inference,
evaluation, and parameter/madds accounting."""

from .kernels import backend_name
from .model import ModelConfig, build_model, default_config

__all__ = ["ModelConfig", "backend_name", "build_model", "default_config"]
__version__ = "0.1.0"
