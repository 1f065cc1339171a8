"""Multi-image super-resolution of satellite revisit time series."""

__version__ = "0.1.0"

from .data import DegradationSpec, PatchSample, Raster, Revisit, Scene, Split, generate_synthetic_scene
from .highresnet import HighResNet, HighResNetConfig
from .srresnet import SRResNet, SRResNetConfig

__all__ = [
    "DegradationSpec",
    "HighResNet",
    "HighResNetConfig",
    "PatchSample",
    "Raster",
    "Revisit",
    "SRResNet",
    "SRResNetConfig",
    "Scene",
    "Split",
    "generate_synthetic_scene",
]
