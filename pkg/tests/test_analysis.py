"""Latent analysis tests: CCA, one-shot probing, PCA baseline, interpolation."""

import numpy as np
import pytest
from scipy.linalg import eigvals

from conformer_forge import analysis
from conformer_forge.analysis import (
    AnalysisError,
    EmbeddingMatrix,
    interpolate_latent,
    one_shot_classifier,
    pca_baseline,
    regression_probe,
    run_cca,
)
from conformer_forge.data import SyntheticConfig, generate_synthetic
from conformer_forge.geometry import center_coords, kabsch_rmsd
from conformer_forge.model import init_model


def embed(values, labels=None):
    values = np.asarray(values, dtype=np.float64)
    return EmbeddingMatrix(values, np.arange(len(values)), labels=labels)


def test_embedding_matrix_validation(rng):
    with pytest.raises(AnalysisError):
        EmbeddingMatrix(np.full((3, 2), np.nan), np.arange(3))
    with pytest.raises(AnalysisError):
        EmbeddingMatrix(rng.normal(size=(3, 2)), np.arange(4))


def test_cca_identical_embeddings(rng):
    X = embed(rng.normal(size=(200, 5)))
    result = run_cca(X, X)
    assert np.max(np.abs(result.correlations - 1.0)) < 1e-6
    assert result.leading_correlation == pytest.approx(1.0, abs=1e-6)


def test_cca_independent_noise(rng):
    X = embed(rng.normal(size=(1000, 4)))
    Y = embed(rng.normal(size=(1000, 4)))
    assert run_cca(X, Y).leading_correlation < 0.2


def test_cca_matches_eigenvalue_oracle(rng):
    # canonical correlations are the sqrt eigenvalues of
    # Sxx^-1 Sxy Syy^-1 Syx, computed here independently
    n = 400
    base = rng.normal(size=(n, 2))
    X = base + 0.3 * rng.normal(size=(n, 2))
    Y = base @ rng.normal(size=(2, 2)) + 0.5 * rng.normal(size=(n, 2))
    got = run_cca(embed(X), embed(Y)).correlations

    Xc = X - X.mean(0)
    Yc = Y - Y.mean(0)
    Sxx = Xc.T @ Xc / (n - 1)
    Syy = Yc.T @ Yc / (n - 1)
    Sxy = Xc.T @ Yc / (n - 1)
    M = np.linalg.solve(Sxx, Sxy) @ np.linalg.solve(Syy, Sxy.T)
    expect = np.sort(np.sqrt(np.real(eigvals(M))))[::-1]
    assert np.max(np.abs(got - expect)) < 1e-6


def test_cca_projection_reaches_leading_correlation(rng):
    n = 500
    base = rng.normal(size=(n, 3))
    X = base + 0.2 * rng.normal(size=(n, 3))
    Y = base + 0.2 * rng.normal(size=(n, 3))
    result = run_cca(embed(X), embed(Y))
    u = (X - X.mean(0)) @ result.transform_x[:, 0]
    v = (Y - Y.mean(0)) @ result.transform_y[:, 0]
    corr = np.corrcoef(u, v)[0, 1]
    assert corr == pytest.approx(result.leading_correlation, abs=1e-8)


def test_cca_shape_checks(rng):
    X = embed(rng.normal(size=(10, 3)))
    Y = embed(rng.normal(size=(12, 3)))
    with pytest.raises(AnalysisError):
        run_cca(X, Y)
    small = embed(rng.normal(size=(3, 4)))
    with pytest.raises(AnalysisError):
        run_cca(small, small)


def test_one_shot_separable_clusters(rng):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    labels = np.repeat([0, 1, 2], 30)
    points = centers[labels] + 0.3 * rng.normal(size=(90, 2))
    test = embed(points, labels=labels)
    acc = one_shot_classifier(centers, np.array([0, 1, 2]), test)
    assert acc == 1.0


def test_one_shot_tie_goes_to_lowest_class():
    train = np.array([[0.0], [2.0]])
    test = embed(np.array([[1.0]]), labels=np.array([0]))
    assert one_shot_classifier(train, np.array([0, 1]), test) == 1.0


def test_one_shot_validation(rng):
    test = embed(rng.normal(size=(4, 2)), labels=np.array([0, 0, 1, 1]))
    with pytest.raises(AnalysisError):
        one_shot_classifier(np.zeros((2, 2)), np.array([0, 0]), test)
    with pytest.raises(AnalysisError):
        one_shot_classifier(np.zeros((1, 2)), np.array([0]), test)
    with pytest.raises(AnalysisError, match="absent"):
        one_shot_classifier(np.zeros((2, 2)), np.array([2, 3]), test)
    no_labels = embed(rng.normal(size=(4, 2)))
    with pytest.raises(AnalysisError):
        one_shot_classifier(np.zeros((2, 2)), np.array([0, 1]), no_labels)


def test_regression_probe_exact_linear(rng):
    X = rng.normal(size=(300, 4))
    beta = np.array([1.0, -2.0, 0.5, 3.0])
    y = X @ beta + 7.0
    res = regression_probe(embed(X), y, task="demo")
    assert res.task == "demo"
    assert res.score < 1e-6


def test_regression_probe_is_held_out(rng):
    # pure-noise target cannot probe better than the property scale
    X = rng.normal(size=(300, 4))
    y = rng.normal(size=300)
    res = regression_probe(embed(X), y)
    assert res.score > 0.5


def test_regression_probe_validation(rng):
    X = embed(rng.normal(size=(10, 3)))
    with pytest.raises(AnalysisError):
        regression_probe(X, np.zeros(10))  # zero variance
    with pytest.raises(AnalysisError):
        regression_probe(X, np.arange(9.0))  # length mismatch
    with pytest.raises(AnalysisError):
        regression_probe(embed(rng.normal(size=(5, 8))), np.arange(5.0))


def test_pca_baseline_matches_covariance_oracle(rng):
    for _ in range(20):
        X = rng.normal(size=(60, 10)) @ rng.normal(size=(10, 10))
        scores = pca_baseline(X, n_components=4).values
        evals = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1]
        got = scores.var(axis=0, ddof=1)
        assert np.max(np.abs(got - evals[:4])) < 1e-8
        assert np.max(np.abs(analysis.explained_variance(X, 4) - evals[:4])) < 1e-8


def test_pca_baseline_sign_convention(rng):
    X = rng.normal(size=(50, 6))
    a = pca_baseline(X, n_components=3).values
    b = pca_baseline(X, n_components=3).values
    assert np.array_equal(a, b)


def test_pca_baseline_validation(rng):
    with pytest.raises(AnalysisError):
        pca_baseline(rng.normal(size=(5, 10)), n_components=6)
    with pytest.raises(AnalysisError):
        pca_baseline(rng.normal(size=(10, 5)), n_components=6)


def test_raw_extrinsic_matrix_shape(tiny_dataset):
    rows = analysis.raw_extrinsic_matrix(tiny_dataset, [0, 1, 2])
    assert rows.shape == (3, (tiny_dataset.meta.atom_count - 1) * 3)


def test_compute_embeddings_aligned(tiny_dataset):
    model = init_model(0, tiny_dataset.frames[0].coords)
    zi, ze = analysis.compute_embeddings(model, tiny_dataset, [0, 5, 20])
    assert zi.values.shape == (3, 16)
    assert ze.values.shape == (3, 32)
    assert np.array_equal(zi.frame_indices, [0, 5, 20])
    assert np.array_equal(zi.labels, tiny_dataset.labels()[[0, 5, 20]])


def test_interpolate_latent_endpoints(tiny_dataset):
    model = init_model(0, tiny_dataset.frames[0].coords)
    a = tiny_dataset.frames[0].coords
    b = tiny_dataset.frames[-1].coords
    path = interpolate_latent(model, a, b, steps=5)
    assert len(path) == 5
    _, _, rmsd_a0 = model.reconstruct(a)
    _, _, rmsd_b0 = model.reconstruct(b)
    assert path[0][1] == pytest.approx(rmsd_a0, abs=1e-9)
    assert path[-1][2] == pytest.approx(rmsd_b0, abs=1e-9)
    # interior decoded frames have the chain's shape
    assert all(p.shape == a.shape for p, _, _ in path)
    with pytest.raises(AnalysisError):
        interpolate_latent(model, a, b, steps=1)
    with pytest.raises(AnalysisError):
        interpolate_latent(model, a, b[:-1])
