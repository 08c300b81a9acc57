"""Spectral-spatial SD-OCT down-scaling and multi-scale reconstruction."""

from .acquisition import (
    Factors,
    compression_ratio,
    degrade,
    drop_spectrum_uniform,
    reconstruct_reference,
    skip_spatial,
    truncate_spectrum_center,
)
from .frames import OctImage, SpectralFrame
from .mssmn import MSSMN, ExtractorConfig, MetaConfig, load_model, save_model
from .phantom import PhantomConfig, generate_phantom

__version__ = "0.1.0"

__all__ = [
    "ExtractorConfig",
    "Factors",
    "MSSMN",
    "MetaConfig",
    "OctImage",
    "PhantomConfig",
    "SpectralFrame",
    "compression_ratio",
    "degrade",
    "drop_spectrum_uniform",
    "generate_phantom",
    "load_model",
    "reconstruct_reference",
    "save_model",
    "skip_spatial",
    "truncate_spectrum_center",
]
