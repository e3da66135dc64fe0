"""Cascade-VAE anomaly detection with a real-vs-reconstruction discriminator.

Submodules: ``nn`` (kernels, Adam), ``models`` (generator/discriminator),
``losses``, ``data`` (synthetic sets, image folders), ``training``,
``scoring``, ``metrics``, ``config`` and ``cli``.
"""

from .models import PRESETS, ArchConfig, generator_forward, init_discriminator, init_generator
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "Checkpoint",
    "PRESETS",
    "TrainConfig",
    "generator_forward",
    "init_discriminator",
    "init_generator",
    "load_checkpoint",
    "save_checkpoint",
]
