"""Session-based recommendation with the Atten-Mixer attention readout."""

from .data import SessionDataset, TrainingExample, Vocabulary
from .model import HyperParams, forward, init_params
from .training import TrainConfig, fit

__all__ = [
    "HyperParams",
    "SessionDataset",
    "TrainConfig",
    "TrainingExample",
    "Vocabulary",
    "fit",
    "forward",
    "init_params",
]

__version__ = "0.1.0"
