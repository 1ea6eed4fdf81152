"""Input-dependent dynamic-depth Transformer encoder on a synthetic task."""

from .encoder import EncoderConfig
from .data import SyntheticTaskSpec, Batch
from .model import Model, Checkpoint
from .tensor import Tensor
from .training import TrainConfig

__all__ = [
    "Batch",
    "Checkpoint",
    "EncoderConfig",
    "Model",
    "SyntheticTaskSpec",
    "Tensor",
    "TrainConfig",
]

__version__ = "0.1.0"
