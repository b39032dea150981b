"""RelationEngine - visual relationship detection with a from-scratch vision-language Transformer."""

__version__ = "0.1.0"

from relation_engine.config import DataConfig, ModelConfig, RunConfig, TrainConfig
from relation_engine.dataset import DatasetManifest, DatasetMode, generate_synthetic, load_dataset
from relation_engine.evaluator import evaluate, recall_at_k
from relation_engine.model import RelationshipModel
from relation_engine.tensor import Tensor, backward, no_grad
from relation_engine.trainer import Trainer

__all__ = [
    "DataConfig",
    "DatasetManifest",
    "DatasetMode",
    "ModelConfig",
    "RelationshipModel",
    "RunConfig",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "backward",
    "evaluate",
    "generate_synthetic",
    "load_dataset",
    "no_grad",
    "recall_at_k",
]
