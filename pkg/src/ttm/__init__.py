"""Tiny Time Mixer forecasting on a small numpy autodiff engine."""

from .config import HeadConfig, ModelConfig, TrainConfig
from .model import TTM, adapt_head, build_store
from .store import ParameterStore, load, save

__all__ = [
    "HeadConfig",
    "ModelConfig",
    "ParameterStore",
    "TTM",
    "TrainConfig",
    "adapt_head",
    "build_store",
    "load",
    "save",
]

__version__ = "0.1.0"
