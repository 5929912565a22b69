"""Pyramidal predictive network for video-frame prediction."""

__version__ = "0.1.0"

from .config import DataConfig, TrainConfig
from .data import SequenceSet, gen_moving_shapes
from .estimator import PPNetPredictor
from .loss import LossConfig
from .network import PPNet, PPNetConfig, schedule_trace

__all__ = [
    "__version__",
    "DataConfig",
    "LossConfig",
    "PPNet",
    "PPNetConfig",
    "PPNetPredictor",
    "SequenceSet",
    "TrainConfig",
    "gen_moving_shapes",
    "schedule_trace",
]
