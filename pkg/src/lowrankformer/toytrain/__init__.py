"""Desk-scale training harness for the classifier variants."""

from .data import (
    Dataset,
    IdxFormatError,
    MNIST_FILES,
    SyntheticSpec,
    load_mnist_idx,
    majority_label,
    make_synthetic,
    read_idx,
    write_idx,
)
from .train import Adam, DivergenceError, EpochMetrics, TrainConfig, TrainHistory, evaluate, train

__all__ = [
    "Adam", "Dataset", "DivergenceError", "EpochMetrics", "IdxFormatError", "MNIST_FILES",
    "SyntheticSpec",
    "TrainConfig", "TrainHistory", "evaluate", "load_mnist_idx", "majority_label",
    "make_synthetic", "read_idx", "train", "write_idx",
]
