"""Wave-GMS: latent-space medical image segmentation with a multi-resolution
Haar wavelet encoder, a frozen compact VAE and a latent mapping model."""

from wavegms.encoder import EncoderConfig, MultiResEncoder
from wavegms.lmm import LatentMappingModel, LmmConfig
from wavegms.pipeline import WaveGms
from wavegms.vae import FrozenVae

__all__ = [
    "EncoderConfig",
    "FrozenVae",
    "LatentMappingModel",
    "LmmConfig",
    "MultiResEncoder",
    "WaveGms",
]

__version__ = "0.1.0"
