"""Geometric autoencoder toolkit for conformational ensembles of 3D chains."""

from conformer_forge.data import (
    ConformationFrame,
    DatasetMeta,
    SplitAssignment,
    SyntheticConfig,
    TrajectoryDataset,
    generate_synthetic,
    load_dataset,
    split_dataset,
    write_dataset,
)
from conformer_forge.model import ChainAutoencoder, ModelConfig, init_model
from conformer_forge.training import TrainConfig, evaluate, train_model

__all__ = [
    "ChainAutoencoder",
    "ConformationFrame",
    "DatasetMeta",
    "ModelConfig",
    "SplitAssignment",
    "SyntheticConfig",
    "TrainConfig",
    "TrajectoryDataset",
    "evaluate",
    "generate_synthetic",
    "init_model",
    "load_dataset",
    "split_dataset",
    "train_model",
    "write_dataset",
]

__version__ = "0.1.0"
