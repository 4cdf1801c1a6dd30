"""Tri-modal (X-ray, ECG, text) contrastive pre-training on a small numpy autodiff core."""

from ._kernels import BACKEND
from .model import ModelConfig, MoreModel

__version__ = "0.1.0"

__all__ = ["BACKEND", "ModelConfig", "MoreModel", "__version__"]
