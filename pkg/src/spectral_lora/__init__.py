"""Low-rank adapters, Fourier-domain adapter regularization and a clipped
second-order optimizer on a tiny numpy decoder."""

from .lora import LoraAdapter, LoraSet, init_adapters, load_checkpoint, merge, save_checkpoint, unmerge
from .model import DecoderModel, ModelConfig
from .spectral import FourierRegConfig
from .trainer import TrainConfig, train

__all__ = [
    "DecoderModel",
    "FourierRegConfig",
    "LoraAdapter",
    "LoraSet",
    "ModelConfig",
    "TrainConfig",
    "init_adapters",
    "load_checkpoint",
    "merge",
    "save_checkpoint",
    "train",
    "unmerge",
]
