"""Patch-consistency image forgery detection on synthetic and real data."""

from .consistency import EmbeddingHeads, consistency_volume, ipc_loss, target_volume
from .inference import InferenceConfig, Prediction, predict, predict_batch
from .model import Detector, ModelConfig
from .samples import Box, ConfigError, DataError, ImageSample, IngestionError, PseudoMask
from .training import TrainConfig, fit, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Box", "ConfigError", "DataError", "Detector", "EmbeddingHeads", "ImageSample", "InferenceConfig",
    "IngestionError", "ModelConfig", "Prediction", "PseudoMask", "TrainConfig", "consistency_volume", "fit",
    "ipc_loss", "load_checkpoint", "predict", "predict_batch", "target_volume",
]
