"""Toy multi-modal trainer on synthetic data."""

from .ablation import AblationRow, ablation_suite, anchor_sweep
from .data import SyntheticDataset, SyntheticDatasetSpec, generate_synthetic, split_dataset
from .heads import ProjectionHead
from .memory import MemoryBank
from .metrics import (
    DegenerateSimilarityError,
    RetrievalMetrics,
    full_video_retrieval_eval,
    retrieval_eval,
    structure_preservation_score,
)
from .train import (
    ABLATIONS,
    MultiModalModel,
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    evaluate,
    train,
)

__all__ = [
    "ABLATIONS",
    "AblationRow",
    "DegenerateSimilarityError",
    "MemoryBank",
    "MultiModalModel",
    "ProjectionHead",
    "RetrievalMetrics",
    "SyntheticDataset",
    "SyntheticDatasetSpec",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "ablation_suite",
    "anchor_sweep",
    "evaluate",
    "full_video_retrieval_eval",
    "generate_synthetic",
    "retrieval_eval",
    "split_dataset",
    "structure_preservation_score",
    "train",
]
