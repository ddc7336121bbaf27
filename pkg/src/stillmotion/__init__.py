"""stillmotion: animate still images with a text-guided latent video
diffusion model conditioned on inter-frame affinity."""

from . import affinity, checkpoint, codec, denoiser, diffusion, evalbench, pvid, synth, text, trainer
from .errors import (
    ConfigError,
    DataError,
    InputDomainError,
    ModelError,
    ShapeError,
    StillmotionError,
)

__all__ = [
    "affinity",
    "checkpoint",
    "codec",
    "denoiser",
    "diffusion",
    "evalbench",
    "pvid",
    "synth",
    "text",
    "trainer",
    "ConfigError",
    "DataError",
    "InputDomainError",
    "ModelError",
    "ShapeError",
    "StillmotionError",
]

__version__ = "0.1.0"
