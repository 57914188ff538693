"""Synthetic 4D flow MRI, a patch-based 3D super-resolution network, and flow metrics."""
from .errors import (
    ConfigError,
    FormatError,
    Flow4DError,
    NumericError,
    ValidationError,
)
from .flowfield import FlowSpec, FluidMask, Grid3, VelocityField, generate_field
from .net import FlowNet, NetConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FlowNet",
    "FlowSpec",
    "Flow4DError",
    "FluidMask",
    "FormatError",
    "Grid3",
    "NetConfig",
    "NumericError",
    "ValidationError",
    "VelocityField",
    "generate_field",
]
