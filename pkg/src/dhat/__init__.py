"""Desk-scale laboratory for dual-head adversarial training.

The package bundles a from-scratch reverse-mode autodiff engine, small
residual classifier families, a logits-fusion merge CNN, L-inf attacks,
staged adversarial training objectives, evaluation and reporting tools,
and binary dataset/checkpoint formats behind one CLI.
"""

from .errors import (
    ArchitectureError,
    ArgumentError,
    CheckpointError,
    ConfigError,
    DhatError,
    DimensionError,
    FormatError,
    NumericError,
    StateError,
)
from .tensor import Tensor

__all__ = [
    "Tensor",
    "DhatError",
    "DimensionError",
    "ArgumentError",
    "StateError",
    "ArchitectureError",
    "NumericError",
    "CheckpointError",
    "FormatError",
    "ConfigError",
]

__version__ = "0.1.0"
