"""Scikit-learn compatible estimator wrapper around the chain autoencoder.

The estimator consumes stacked conformations shaped (n_frames, n_atoms, 3),
fits the autoencoder, and exposes the latent code through the transformer
API so it composes with sklearn pipelines and model selection.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from conformer_forge.data import (
    ConformationFrame,
    DatasetMeta,
    TrajectoryDataset,
    split_dataset,
)
from conformer_forge.model import ModelConfig, init_model
from conformer_forge.training import TrainConfig, train_model

__all__ = ["GeometricChainAutoencoder", "validate_conformations"]


def validate_conformations(X, min_frames: int = 3) -> np.ndarray:
    """Validate and convert input to a finite (n_frames, n_atoms, 3) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError(f"expected (n_frames, n_atoms, 3), got {X.shape}")
    if X.shape[0] < min_frames:
        raise ValueError(f"need at least {min_frames} frames")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite coordinates")
    return X


class GeometricChainAutoencoder(TransformerMixin, BaseEstimator):
    """Autoencoder of chain conformations with disentangled latents.

    Parameters mirror the training defaults; ``transform`` returns the
    concatenated [intrinsic || extrinsic] latent code per frame and
    ``inverse_transform`` decodes codes back to centered coordinates.
    """

    def __init__(self, epochs: int = 100, lr: float = 1e-3,
                 lr_decay: float = 0.995, weight_decay: float = 5e-5,
                 batch_size: int = 64, bond_penalty_weight: float = 0.5,
                 contact_cutoff: float = 8.0, use_intrinsic: bool = True,
                 random_state: int = 0):
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.bond_penalty_weight = bond_penalty_weight
        self.contact_cutoff = contact_cutoff
        self.use_intrinsic = use_intrinsic
        self.random_state = random_state

    def _dataset(self, X: np.ndarray) -> TrajectoryDataset:
        n_frames, n_atoms, _ = X.shape
        meta = DatasetMeta(
            atom_count=n_atoms, frame_count=n_frames,
            residue_index=np.arange(n_atoms),
            chain_id=np.zeros(n_atoms, dtype=np.int64),
            label_names=[], property_names=[],
        )
        frames = [ConformationFrame(coords=X[t], frame_index=t, label_id=0)
                  for t in range(n_frames)]
        ds = TrajectoryDataset(meta=meta, frames=frames)
        ds.splits = split_dataset(ds, seed=self.random_state)
        return ds

    def fit(self, X, y=None):
        X = validate_conformations(X)
        config = ModelConfig(contact_cutoff=self.contact_cutoff,
                             use_intrinsic=self.use_intrinsic)
        self.model_ = init_model(self.random_state, X[0], config)
        ds = self._dataset(X)
        train_cfg = TrainConfig(
            lr=self.lr, lr_decay=self.lr_decay, weight_decay=self.weight_decay,
            epochs=self.epochs, batch_size=self.batch_size,
            bond_penalty_weight=self.bond_penalty_weight,
            seed=self.random_state, use_intrinsic=self.use_intrinsic,
        )
        self.history_ = train_model(self.model_, ds, train_cfg)
        self.n_atoms_ = X.shape[1]
        self.latent_dim_ = self.model_.config.latent_dim
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = validate_conformations(X, min_frames=1)
        if X.shape[1] != self.n_atoms_:
            raise ValueError("atom count differs from the fitted chain")
        return np.array([np.concatenate(self.model_.encode(frame)) for frame in X])

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "model_")
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.latent_dim_:
            raise ValueError(f"expected (n, {self.latent_dim_}) latent codes")
        return np.stack([self.model_.decode(z) for z in Z])

    def score(self, X, y=None) -> float:
        """Negative mean per-atom reconstruction error (higher is better)."""
        check_is_fitted(self, "model_")
        X = validate_conformations(X, min_frames=1)
        errors = [self.model_.reconstruct(frame)[1].mean() for frame in X]
        return -float(np.mean(errors))
