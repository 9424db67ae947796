"""Prototype-based, explainable multi-modal bone health classification."""

from .data import (
    ClinicalFeatures,
    DatasetSplit,
    EMBEDDING_DIM,
    FEATURE_NAMES,
    Label,
    PatientCase,
    Standardizer,
    SynthConfig,
    ValidationError,
    generate_synthetic,
    load_dataset,
    make_case,
    split_dataset,
    who_label,
)
from .estimator import ProtoMedXClassifier
from .evaluation import compare_heads, compute_metrics, evaluate, run_ablations
from .explain import ExplanationReport, NeighborVote, confidence, explain, feature_deviation, knn_classify
from .model import ProtoMedXModel
from .training import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainedModel,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ClinicalFeatures",
    "Checkpoint",
    "CheckpointError",
    "DatasetSplit",
    "EMBEDDING_DIM",
    "ExplanationReport",
    "FEATURE_NAMES",
    "Label",
    "NeighborVote",
    "PatientCase",
    "ProtoMedXClassifier",
    "ProtoMedXModel",
    "Standardizer",
    "SynthConfig",
    "TrainConfig",
    "TrainedModel",
    "TrainingDivergedError",
    "ValidationError",
    "compare_heads",
    "compute_metrics",
    "confidence",
    "evaluate",
    "explain",
    "feature_deviation",
    "generate_synthetic",
    "knn_classify",
    "load_checkpoint",
    "load_dataset",
    "make_case",
    "run_ablations",
    "save_checkpoint",
    "split_dataset",
    "train",
    "who_label",
    "__version__",
]
