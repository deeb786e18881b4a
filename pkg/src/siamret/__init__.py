"""Pair-supervised image embeddings with retrieval, evaluation, and projection."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FormatError,
    NonFiniteError,
    RadiusEstimationError,
    ShapeError,
    SiamretError,
    ValidationError,
)

__all__ = [
    "__version__",
    "SiamretError",
    "ValidationError",
    "ShapeError",
    "NonFiniteError",
    "FormatError",
    "ConfigError",
    "RadiusEstimationError",
]
