"""Multi-task image enhancer for daytime haze, low light and nighttime haze."""
from .tasks import TaskKind
from .net import MKoIE, ModelConfig, build_model
from .loss import FeatureExtractor, total_loss
from .train import TrainConfig, lr_at

__version__ = "0.1.0"

__all__ = [
    "TaskKind",
    "MKoIE",
    "ModelConfig",
    "build_model",
    "FeatureExtractor",
    "total_loss",
    "TrainConfig",
    "lr_at",
]
