"""Hybrid fake-media detector: ViT/CNN fusion, multi-stream texture model, calibrated ensemble."""
from .config import ModelConfig
from .errors import (ConfigurationError, ContractError, DegenerateInputError, DimensionError, FormatError,
                     HFMFError, LayoutError)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["ModelConfig", "HFMFError", "DimensionError", "ContractError", "ConfigurationError",
           "DegenerateInputError", "LayoutError", "FormatError", "BACKEND", "__version__"]
