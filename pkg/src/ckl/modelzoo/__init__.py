"""Model construction, datasets, supervised training and checkpoints."""

from .architectures import (
    ARCHITECTURES,
    ArchitectureSpec,
    UnknownArchitectureError,
    count_parameters,
)
from .checkpoint import CheckpointError, checkpoint_hash, load_checkpoint, read_manifest, save_checkpoint
from .core import (
    Classifier,
    ImageBatch,
    NotDifferentiableError,
    ShapeMismatchError,
    accuracy,
    build_model,
    ce_loss,
    forward_logits,
    input_gradient,
    per_sample_ce,
    predict,
)
from .data import (
    CIFAR_INFO,
    DatasetCorruptError,
    DatasetNotFoundError,
    ImageDataset,
    convert_cifar,
    dataset_from_batch,
    load_dataset,
    make_synthetic,
)
from .training import TrainConfig, TrainingDivergedError, TrainingLog, train_supervised

__all__ = [
    "ARCHITECTURES",
    "ArchitectureSpec",
    "CIFAR_INFO",
    "CheckpointError",
    "Classifier",
    "DatasetCorruptError",
    "DatasetNotFoundError",
    "ImageBatch",
    "ImageDataset",
    "NotDifferentiableError",
    "ShapeMismatchError",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainingLog",
    "UnknownArchitectureError",
    "accuracy",
    "build_model",
    "ce_loss",
    "checkpoint_hash",
    "convert_cifar",
    "count_parameters",
    "dataset_from_batch",
    "forward_logits",
    "input_gradient",
    "load_checkpoint",
    "load_dataset",
    "make_synthetic",
    "per_sample_ce",
    "predict",
    "read_manifest",
    "save_checkpoint",
    "train_supervised",
]
