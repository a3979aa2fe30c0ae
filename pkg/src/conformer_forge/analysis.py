"""Latent-space analyses: CCA, one-shot linear classification, property
regression with a PCA baseline, and latent interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conformer_forge import geometry
from conformer_forge.data import TrajectoryDataset
from conformer_forge.model import ChainAutoencoder

__all__ = [
    "CCAResult",
    "EmbeddingMatrix",
    "ProbeResult",
    "compute_embeddings",
    "interpolate_latent",
    "one_shot_classifier",
    "pca_baseline",
    "raw_extrinsic_matrix",
    "regression_probe",
    "run_cca",
]

RIDGE = 1e-8


class AnalysisError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    """Per-frame embedding rows with aligned frame indices."""

    values: np.ndarray  # (frames, dims)
    frame_indices: np.ndarray
    labels: np.ndarray | None = None
    properties: dict | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        if not np.all(np.isfinite(self.values)):
            raise AnalysisError("non-finite embedding entries")
        if self.values.shape[0] != len(self.frame_indices):
            raise AnalysisError("row count != frame index list length")


@dataclass
class CCAResult:
    transform_x: np.ndarray  # (m1, m1)
    transform_y: np.ndarray  # (m2, m2)
    correlations: np.ndarray  # sorted descending, length min(m1, m2)

    @property
    def leading_correlation(self) -> float:
        return float(self.correlations[0])


@dataclass
class ProbeResult:
    task: str
    score: float  # accuracy or normalized error in sigma units
    baseline: float | None = None


def compute_embeddings(model: ChainAutoencoder, dataset: TrajectoryDataset,
                       indices) -> tuple[EmbeddingMatrix, EmbeddingMatrix]:
    """Intrinsic and extrinsic embedding matrices for the given frames."""
    indices = np.asarray(indices, dtype=np.int64)
    zi_rows, ze_rows, labels = [], [], []
    for i in indices:
        frame = dataset.frames[int(i)]
        z_i, z_e = model.encode(frame.coords)
        zi_rows.append(z_i)
        ze_rows.append(z_e)
        labels.append(frame.label_id)
    labels = np.array(labels)
    zi = np.array(zi_rows) if zi_rows and zi_rows[0].size else np.zeros((len(indices), 0))
    return (
        EmbeddingMatrix(zi, indices, labels=labels),
        EmbeddingMatrix(np.array(ze_rows), indices, labels=labels),
    )


def _inv_sqrt(S: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(S)
    if np.any(evals <= 0):
        raise AnalysisError("covariance not positive definite after ridge")
    return evecs @ np.diag(evals**-0.5) @ evecs.T


def run_cca(X: EmbeddingMatrix, Y: EmbeddingMatrix) -> CCAResult:
    """Canonical correlation analysis via whitening and SVD of the
    cross-covariance, with a small ridge on each covariance."""
    Xv, Yv = X.values, Y.values
    n = Xv.shape[0]
    if Yv.shape[0] != n:
        raise AnalysisError("embeddings must have the same row count")
    m1, m2 = Xv.shape[1], Yv.shape[1]
    if n < max(m1, m2) + 1:
        raise AnalysisError("not enough rows for CCA")
    Xc = Xv - Xv.mean(axis=0)
    Yc = Yv - Yv.mean(axis=0)
    Sxx = Xc.T @ Xc / (n - 1) + RIDGE * np.eye(m1)
    Syy = Yc.T @ Yc / (n - 1) + RIDGE * np.eye(m2)
    Sxy = Xc.T @ Yc / (n - 1)
    Wx = _inv_sqrt(Sxx)
    Wy = _inv_sqrt(Syy)
    U, S, Vt = np.linalg.svd(Wx @ Sxy @ Wy, full_matrices=True)
    corr = np.clip(S, 0.0, 1.0)
    return CCAResult(
        transform_x=Wx @ U,
        transform_y=Wy @ Vt.T,
        correlations=corr[: min(m1, m2)],
    )


def one_shot_classifier(train_embeddings: np.ndarray, train_labels: np.ndarray,
                        test: EmbeddingMatrix) -> float:
    """Accuracy of nearest-exemplar classification with one row per class.

    With a single example per class, any max-margin linear fit degenerates
    to nearest centroid, so this is the one-shot linear classifier.
    Distance ties go to the lowest class id.
    """
    train_embeddings = np.asarray(train_embeddings, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    if len(np.unique(train_labels)) != len(train_labels):
        raise AnalysisError("need exactly one training row per class")
    if len(train_labels) < 2:
        raise AnalysisError("need at least 2 classes")
    if test.labels is None:
        raise AnalysisError("test embedding has no labels")
    order = np.argsort(train_labels, kind="stable")
    exemplars = train_embeddings[order]
    classes = train_labels[order]
    missing = set(np.unique(test.labels)) - set(classes.tolist())
    if missing:
        raise AnalysisError(f"classes absent from training: {sorted(missing)}")
    d = np.linalg.norm(test.values[:, None, :] - exemplars[None, :, :], axis=2)
    pred = classes[np.argmin(d, axis=1)]  # argmin ties to lowest class id
    return float(np.mean(pred == test.labels))


def regression_probe(X: EmbeddingMatrix, values: np.ndarray, task: str = "",
                     holdout_fraction: float = 0.2, seed: int = 0) -> ProbeResult:
    """Held-out linear regression; error is RMSE in units of the property
    standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    n, d = X.values.shape
    if len(values) != n:
        raise AnalysisError("property length != embedding rows")
    sigma = values.std()
    if sigma == 0:
        raise AnalysisError("zero-variance property")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(n * holdout_fraction))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if len(train_idx) < d + 1:
        raise AnalysisError("not enough rows to fit the probe")
    A = np.column_stack([X.values[train_idx], np.ones(len(train_idx))])
    reg = RIDGE * np.eye(d + 1)
    reg[-1, -1] = 0.0  # intercept is not penalized
    beta = np.linalg.solve(A.T @ A + reg, A.T @ values[train_idx])
    At = np.column_stack([X.values[test_idx], np.ones(len(test_idx))])
    rmse = float(np.sqrt(np.mean((At @ beta - values[test_idx]) ** 2)))
    return ProbeResult(task=task, score=rmse / sigma)


def raw_extrinsic_matrix(dataset: TrajectoryDataset, indices) -> np.ndarray:
    """Flattened oriented bond vectors per frame, the PCA baseline input."""
    rows = []
    for i in np.asarray(indices, dtype=np.int64):
        coords = dataset.frames[int(i)].coords
        graph = geometry.build_backbone_graph(coords.shape[0])
        rows.append(geometry.extrinsic_signal(graph, coords).ravel())
    return np.array(rows)


def pca_baseline(signals: np.ndarray, n_components: int = 32,
                 frame_indices=None, labels=None) -> EmbeddingMatrix:
    """Scores on the top principal axes of the mean-centered signal matrix.

    Sign convention: the largest-magnitude loading of each axis is positive.
    """
    signals = np.asarray(signals, dtype=np.float64)
    n, d = signals.shape
    if n < n_components:
        raise AnalysisError("fewer rows than components")
    if d < n_components:
        raise AnalysisError("fewer features than components")
    centered = signals - signals.mean(axis=0)
    U, S, Vt = np.linalg.svd(centered, full_matrices=False)
    axes = Vt[:n_components]
    for i in range(n_components):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    scores = centered @ axes.T
    if frame_indices is None:
        frame_indices = np.arange(n)
    return EmbeddingMatrix(scores, frame_indices, labels=labels)


def explained_variance(signals: np.ndarray, n_components: int) -> np.ndarray:
    """Variance along the top principal axes (descending)."""
    signals = np.asarray(signals, dtype=np.float64)
    centered = signals - signals.mean(axis=0)
    _, S, _ = np.linalg.svd(centered, full_matrices=False)
    var = S**2 / (signals.shape[0] - 1)
    return var[:n_components]


def interpolate_latent(model: ChainAutoencoder, coords_a: np.ndarray,
                       coords_b: np.ndarray, steps: int = 11
                       ) -> list[tuple[np.ndarray, float, float]]:
    """Decode the linear latent path between two frames.

    Returns, per step, the decoded coordinates and the aligned RMSD to both
    endpoint ground truths.
    """
    if steps < 2:
        raise AnalysisError("need at least 2 steps")
    coords_a = np.asarray(coords_a, dtype=np.float64)
    coords_b = np.asarray(coords_b, dtype=np.float64)
    if coords_a.shape != coords_b.shape:
        raise AnalysisError("endpoint frames differ in length")
    za = np.concatenate(model.encode(coords_a))
    zb = np.concatenate(model.encode(coords_b))
    target_a = geometry.center_coords(coords_a)
    target_b = geometry.center_coords(coords_b)
    out = []
    for alpha in np.linspace(0.0, 1.0, steps):
        z = (1.0 - alpha) * za + alpha * zb
        pred = model.decode(z)
        _, rmsd_a = geometry.kabsch_rmsd(pred, target_a)
        _, rmsd_b = geometry.kabsch_rmsd(pred, target_b)
        out.append((pred, rmsd_a, rmsd_b))
    return out
