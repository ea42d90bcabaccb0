"""Encoder-based hair transfer over a toy StyleGAN-like generator."""

from .config import GeneratorConfig
from .generator import FTensor, ToyGenerator
from .pipeline import HairFastRuntime, StageArtifacts, TransferRequest, transfer

__version__ = "0.1.0"

__all__ = [
    "GeneratorConfig",
    "ToyGenerator",
    "FTensor",
    "HairFastRuntime",
    "TransferRequest",
    "StageArtifacts",
    "transfer",
    "__version__",
]
