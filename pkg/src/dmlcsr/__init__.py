"""Face parsing with edge-aware multi-task learning and cyclical self-regulation."""

from .config import CLASS_NAMES, HELEN_GROUPS, ConfigError, ModelConfig, RunConfig, preset
from .csr import run_training, self_ensemble
from .estimator import EdgeLabeler, FaceParser
from .model import DMLNet

__all__ = [
    "CLASS_NAMES",
    "HELEN_GROUPS",
    "ConfigError",
    "DMLNet",
    "EdgeLabeler",
    "FaceParser",
    "ModelConfig",
    "RunConfig",
    "preset",
    "run_training",
    "self_ensemble",
]
__version__ = "0.1.0"
