"""Gated progressive fusion of image and text embeddings for re-identification."""

from .data import Dataset, EmbeddingRecord, gen_synthetic, load_dataset, save_dataset
from .estimator import GatedFusionReID
from .evaluation import EvalReport, compute_cmc, compute_map, evaluate
from .model import FusedFeature, GpfModel, ModelConfig
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EmbeddingRecord",
    "EvalReport",
    "FusedFeature",
    "GatedFusionReID",
    "GpfModel",
    "ModelConfig",
    "TrainConfig",
    "compute_cmc",
    "compute_map",
    "evaluate",
    "gen_synthetic",
    "load_dataset",
    "save_dataset",
    "train",
]
