"""End-to-end acceptance gate.

Each test covers one numbered criterion and emits a single pass/fail line,
echoed in the terminal summary so the gate is readable from any run.
The full-scale reference training is shared by several criteria and runs
once per session; expect the module to take several minutes.
"""

import time

import numpy as np
import pytest

from _acceptance_report import LINES as _REPORT_LINES

from conformer_forge import analysis, autodiff as ad, geometry
from conformer_forge.autodiff import BatchNorm, Tensor, grad_check
from conformer_forge.data import (
    SyntheticConfig,
    base_helix,
    generate_synthetic,
    split_dataset,
)
from conformer_forge.graph_layers import (
    Dense,
    EdgeConv,
    GraphAttention,
    build_radius_graph,
    farthest_point_sample,
)
from conformer_forge.model import ModelConfig, init_model
from conformer_forge.training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_model,
    transfer_fit,
)


def report(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    _REPORT_LINES.append(line)
    print(line)
    assert ok, detail


# -- shared full-scale artifacts --------------------------------------------

@pytest.fixture(scope="module")
def reference_dataset():
    """64 atoms, 3 classes, 600 frames, seed 7 (training defaults)."""
    ds = generate_synthetic(SyntheticConfig(
        atom_count=64, class_count=3, frames_per_class=200,
        breath_amplitude=0.05, seed=7))
    ds.splits = split_dataset(ds, seed=7)
    return ds


@pytest.fixture(scope="module")
def reference_run(reference_dataset):
    """One full 100-epoch training run shared by criteria 5, 6, 7, 9, 10."""
    ds = reference_dataset
    model = init_model(7, ds.frames[int(ds.splits.train[0])].coords)
    t0 = time.time()
    history = train_model(model, ds, TrainConfig(epochs=100, seed=7))
    elapsed = time.time() - t0
    return model, history, elapsed


@pytest.fixture(scope="module")
def reference_checkpoint(reference_run, tmp_path_factory):
    model, _, _ = reference_run
    path = tmp_path_factory.mktemp("ref") / "ckpt"
    save_checkpoint(model, path)
    return path


# -- criterion 1: gradient correctness ---------------------------------------

def test_criterion_1_gradients():
    t0 = time.time()
    rng = np.random.default_rng(0)
    tol = 1e-4
    worst = 0.0

    def check(fn, inputs, **kw):
        nonlocal worst
        worst = max(worst, grad_check(fn, inputs, h=1e-5, **kw))

    # dense layer
    dense = Dense("d", 5, 4, rng)
    x = Tensor(rng.normal(size=(6, 5)))
    w = rng.normal(size=(6, 4))
    check(lambda: ad.reduce_sum(ad.mul(dense(x), w)), [x, *dense.parameters()])

    # edge convolution on a small chain graph
    conv = EdgeConv("c", 3, 3, 4, rng)
    f0 = Tensor(rng.normal(size=(5, 3)))
    ef = Tensor(rng.normal(size=(4, 3)))
    edges = np.column_stack([np.arange(4), np.arange(1, 5)])
    wc = rng.normal(size=(5, 4))
    check(lambda: ad.reduce_sum(ad.mul(conv(f0, ef, edges, 5), wc)),
          [f0, ef, *conv.parameters()])

    # graph attention with self-loops
    gat = GraphAttention("g", 4, 8, rng, heads=4)
    xg = Tensor(rng.normal(size=(5, 4)))
    ge = np.vstack([edges, edges[:, ::-1],
                    np.column_stack([np.arange(5), np.arange(5)])])
    wg = rng.normal(size=(5, 8))
    check(lambda: ad.reduce_sum(ad.mul(gat(xg, ge, 5), wg)),
          [xg, *gat.parameters()], skip_nonsmooth=True)

    # batch normalization (training statistics path)
    bn = BatchNorm(3)
    xb = Tensor(rng.normal(size=(8, 3)))
    wb = rng.normal(size=(8, 3))
    check(lambda: ad.reduce_sum(ad.mul(bn(xb, training=True), wb)),
          [xb, bn.gamma, bn.beta])

    # end-to-end loss on a 16-atom chain
    coords = base_helix(16, 3.8) + np.random.default_rng(0).normal(
        0.0, 0.05, (16, 3))
    model = init_model(3, coords)
    fi = model.prepare_frame(coords)
    fn = lambda: model.frame_loss(fi, training=True)[0]
    # central differences cannot resolve gradients below |loss|*eps/h
    floor = abs(float(fn().value)) * np.finfo(float).eps / (2e-5 * tol) * 4
    check(fn, model.parameters(), sample=3, rng=np.random.default_rng(11),
          skip_nonsmooth=True, min_magnitude=floor)

    elapsed = time.time() - t0
    report(1, worst < tol and elapsed < 60.0,
           f"max relative grad error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


# -- criterion 2: geometric invariances --------------------------------------

def _random_rigid(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q, rng.normal(scale=20.0, size=3)


def test_criterion_2_invariances(helix32):
    rng = np.random.default_rng(42)
    coords = helix32
    graph = geometry.build_backbone_graph(coords.shape[0])
    contact = geometry.build_contact_graph(coords, 8.0, 4)
    base_int = geometry.intrinsic_signal(contact, coords)
    base_ext = geometry.extrinsic_signal(graph, coords)
    worst_int = worst_ext = 0.0
    for _ in range(100):
        R, t = _random_rigid(rng)
        moved = coords @ R.T + t
        c2 = geometry.build_contact_graph(moved, 8.0, 4)
        assert np.array_equal(c2.edges, contact.edges)
        worst_int = max(worst_int, np.max(np.abs(
            geometry.intrinsic_signal(c2, moved) - base_int)))
        worst_ext = max(worst_ext, np.max(np.abs(
            geometry.extrinsic_signal(graph, moved) - base_ext @ R.T)))

    model = init_model(0, coords)
    z = np.concatenate(model.encode(coords))
    worst_tr = 0.0
    for _ in range(10):
        shift = rng.normal(scale=50.0, size=3)
        z2 = np.concatenate(model.encode(coords + shift))
        worst_tr = max(worst_tr, np.max(np.abs(z2 - z)))

    ok = worst_int < 1e-9 and worst_ext < 1e-9 and worst_tr < 1e-9
    report(2, ok, f"intrinsic {worst_int:.1e}, extrinsic {worst_ext:.1e}, "
                  f"encode translation {worst_tr:.1e} (all < 1e-9)")


# -- criterion 3: oracle equivalence ------------------------------------------

def _fps_oracle(points, count):
    selected = [0]
    while len(selected) < count:
        best, best_d = None, -1.0
        for i in range(len(points)):
            d = min(np.linalg.norm(points[i] - points[j]) for j in selected)
            if d > best_d + 1e-15:
                best, best_d = i, d
        selected.append(best)
    return np.array(selected)


def test_criterion_3_oracles():
    rng = np.random.default_rng(7)
    checks = 0
    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(8, 65))
        pts = rng.normal(scale=5.0, size=(m, 3))

        # contact graph vs brute-force pair scan
        cutoff, sep = 8.0, 4
        got = geometry.build_contact_graph(pts, cutoff, sep).edges
        expect = np.array([(i, j) for i in range(m) for j in range(i + 1, m)
                           if j - i >= sep
                           and np.linalg.norm(pts[i] - pts[j]) <= cutoff]
                          ).reshape(-1, 2)
        assert np.array_equal(got, expect)

        # FPS vs exhaustive greedy oracle
        count = max(2, m // 2)
        assert np.array_equal(farthest_point_sample(pts, count),
                              _fps_oracle(pts, count))

        # radius graph vs pairwise scan
        r = float(rng.uniform(2.0, 10.0))
        got = build_radius_graph(pts, r)
        expect = np.array([(i, j) for i in range(m) for j in range(m)
                           if i == j or np.linalg.norm(pts[i] - pts[j]) <= r])
        assert np.array_equal(got, expect)

        # Kabsch RMSD vs direct eigen solution of the quaternion method
        other = pts @ _random_rigid(rng)[0].T + rng.normal(size=3) \
            + rng.normal(scale=0.3, size=pts.shape)
        _, got_rmsd = geometry.kabsch_rmsd(pts, other)
        from scipy.spatial.transform import Rotation
        a = pts - pts.mean(0)
        b = other - other.mean(0)
        _, rssd = Rotation.align_vectors(b, a)
        worst = max(worst, abs(got_rmsd - rssd / np.sqrt(m)))

        # PCA explained variance vs covariance eigenvalues
        X = rng.normal(size=(m, 6))
        k = 4
        evals = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1][:k]
        worst = max(worst, np.max(np.abs(
            analysis.explained_variance(X, k) - evals)))
        checks += 1
    report(3, checks >= 20 and worst < 1e-8,
           f"{checks} instances, max numeric deviation {worst:.1e} (< 1e-8)")


# -- criterion 4: CCA sanity ---------------------------------------------------

def test_criterion_4_cca():
    rng = np.random.default_rng(0)

    def embed(v):
        return analysis.EmbeddingMatrix(v, np.arange(len(v)))

    X = rng.normal(size=(200, 5))
    same = analysis.run_cca(embed(X), embed(X)).correlations
    err_same = float(np.max(np.abs(same - 1.0)))

    A = rng.normal(size=(1000, 4))
    B = rng.normal(size=(1000, 4))
    lead_noise = analysis.run_cca(embed(A), embed(B)).leading_correlation

    # 2-D case against the closed-form quadratic eigenvalue solution
    n = 500
    base = rng.normal(size=(n, 2))
    Xv = base + 0.3 * rng.normal(size=(n, 2))
    Yv = base @ rng.normal(size=(2, 2)) + 0.4 * rng.normal(size=(n, 2))
    got = analysis.run_cca(embed(Xv), embed(Yv)).correlations
    Xc, Yc = Xv - Xv.mean(0), Yv - Yv.mean(0)
    Sxx = Xc.T @ Xc / (n - 1)
    Syy = Yc.T @ Yc / (n - 1)
    Sxy = Xc.T @ Yc / (n - 1)
    M = np.linalg.solve(Sxx, Sxy) @ np.linalg.solve(Syy, Sxy.T)
    tr, det = np.trace(M), np.linalg.det(M)
    lam = np.array([(tr + np.sqrt(tr**2 - 4 * det)) / 2,
                    (tr - np.sqrt(tr**2 - 4 * det)) / 2])
    err_2d = float(np.max(np.abs(got - np.sqrt(lam))))

    ok = err_same < 1e-6 and lead_noise < 0.2 and err_2d < 1e-6
    report(4, ok, f"identical {err_same:.1e} (< 1e-6), noise leading "
                  f"{lead_noise:.3f} (< 0.2), 2-D closed form {err_2d:.1e}")


# -- criterion 5: learning happens --------------------------------------------

def test_criterion_5_learning(reference_run):
    _, history, elapsed = reference_run
    first = history[0]["train_loss"]
    last = history[-1]["train_loss"]
    ratio = last / first
    report(5, ratio < 0.2 and elapsed < 1800.0,
           f"loss {first:.2f} -> {last:.2f}, ratio {ratio:.3f} (< 0.2), "
           f"{elapsed:.0f}s (< 1800s)")


# -- criterion 6: disentanglement trend ----------------------------------------

def test_criterion_6_one_shot(reference_run, reference_dataset):
    model, _, _ = reference_run
    ds = reference_dataset
    zi, ze = analysis.compute_embeddings(model, ds, ds.splits.test)
    labels = ds.labels()[ds.splits.train]
    acc_e, acc_i = [], []
    # accuracy averaged over 5 deterministic exemplar draws
    for s in range(5):
        rng = np.random.default_rng(s)
        picks = [int(rng.choice(ds.splits.train[labels == c]))
                 for c in np.unique(labels)]
        ti, te = analysis.compute_embeddings(model, ds, picks)
        acc_e.append(analysis.one_shot_classifier(te.values, te.labels, ze))
        acc_i.append(analysis.one_shot_classifier(ti.values, ti.labels, zi))
    mean_e, mean_i = float(np.mean(acc_e)), float(np.mean(acc_i))
    ok = mean_e >= 0.80 and (mean_e - mean_i) >= 0.20
    report(6, ok, f"one-shot extrinsic {mean_e:.3f} (>= 0.80), intrinsic "
                  f"{mean_i:.3f}, gap {mean_e - mean_i:.3f} (>= 0.20)")


# -- criterion 7: probe trend ---------------------------------------------------

def test_criterion_7_probe(reference_run, reference_dataset):
    model, _, _ = reference_run
    ds = reference_dataset
    idx = ds.splits.test
    _, ze = analysis.compute_embeddings(model, ds, idx)
    values = ds.property_values("molecular_weight")[idx]
    latent = analysis.regression_probe(ze, values, task="molecular_weight")
    raw = analysis.raw_extrinsic_matrix(ds, idx)
    pca = analysis.pca_baseline(raw, n_components=ze.values.shape[1],
                                frame_indices=idx)
    baseline = analysis.regression_probe(pca, values, task="molecular_weight")
    report(7, latent.score <= baseline.score,
           f"latent error {latent.score:.3f} <= PCA baseline {baseline.score:.3f} "
           f"(sigma units, held out)")


# -- criterion 8: ablation trend -------------------------------------------------

def test_criterion_8_ablation(reference_dataset):
    ds = reference_dataset
    full, ext_only = [], []
    # trend criterion: both arms share data, seeds and a reduced epoch budget
    for seed in (0, 1, 2):
        for tag, use_i, out in (("full", True, full), ("ext", False, ext_only)):
            cfg = ModelConfig(use_intrinsic=use_i)
            m = init_model(seed, ds.frames[int(ds.splits.train[0])].coords, cfg)
            train_model(m, ds, TrainConfig(epochs=20, seed=seed,
                                           use_intrinsic=use_i))
            out.append(evaluate(m, ds, "test").mean_loss)
    mean_full, mean_ext = float(np.mean(full)), float(np.mean(ext_only))
    report(8, mean_ext >= mean_full,
           f"extrinsic-only test loss {mean_ext:.2f} >= full {mean_full:.2f} "
           f"(3-seed mean)")


# -- criterion 9: transfer trend --------------------------------------------------

def test_criterion_9_transfer(reference_checkpoint):
    tgt = generate_synthetic(SyntheticConfig(
        atom_count=40, class_count=3, frames_per_class=80,
        mode_amplitude=2.0, breath_amplitude=0.05, seed=11))
    tgt.splits = split_dataset(tgt, seed=11)
    transfer, baseline = [], []
    for seed in (0, 1, 2):
        _, rt = transfer_fit(reference_checkpoint, tgt, epochs=10, seed=seed)
        _, rb = transfer_fit(reference_checkpoint, tgt, epochs=10, seed=seed,
                             baseline=True)
        transfer.append(rt.avg_l2)
        baseline.append(rb.avg_l2)
    mean_t, mean_b = float(np.mean(transfer)), float(np.mean(baseline))
    per_seed = ", ".join(f"{t:.3f}/{b:.3f}" for t, b in zip(transfer, baseline))
    report(9, mean_t <= mean_b,
           f"transfer L2 {mean_t:.3f} <= random-init {mean_b:.3f} "
           f"(3-seed mean; per seed {per_seed})")


# -- criterion 10: interpolation endpoints ----------------------------------------

def test_criterion_10_interpolation(reference_run, reference_dataset):
    model, _, _ = reference_run
    ds = reference_dataset
    labels = ds.labels()
    test = ds.splits.test
    a = int(test[labels[test] == 0][0])
    b = int(test[labels[test] == 1][0])
    ca, cb = ds.frames[a].coords, ds.frames[b].coords
    path = analysis.interpolate_latent(model, ca, cb, steps=11)
    _, _, ra0 = model.reconstruct(ca)
    _, _, rb0 = model.reconstruct(cb)
    err_a = abs(path[0][1] - ra0)
    err_b = abs(path[-1][2] - rb0)
    monotone = path[-1][1] > path[0][1]
    ok = err_a < 1e-9 and err_b < 1e-9 and monotone
    report(10, ok, f"endpoint RMSD deviations {err_a:.1e}/{err_b:.1e} (< 1e-9), "
                   f"RMSD-to-A rises {path[0][1]:.3f} -> {path[-1][1]:.3f}")


# -- criterion 11: determinism and persistence -------------------------------------

def test_criterion_11_determinism(tmp_path):
    from conformer_forge.cli import run

    data = tmp_path / "data"
    assert run(["synth", "--atoms", "16", "--classes", "2",
                "--frames-per-class", "30", "--seed", "5",
                "--out", str(data)]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["train", "--data", str(data), "--out", str(out),
                    "--epochs", "3", "--seed", "5"]) == 0
        outs.append(out)
    metrics_same = ((outs[0] / "metrics.csv").read_bytes()
                    == (outs[1] / "metrics.csv").read_bytes())

    model = load_checkpoint(outs[0] / "ckpt")
    round_trip = tmp_path / "rt"
    save_checkpoint(model, round_trip)
    reloaded = load_checkpoint(round_trip)
    params_exact = all(
        np.array_equal(p.value, q.value)
        for p, q in zip(model.parameters(), reloaded.parameters()))
    buffers_exact = all(
        np.array_equal(a, b)
        for (_, a), (_, b) in zip(sorted(model.named_buffers().items()),
                                  sorted(reloaded.named_buffers().items())))
    frame = generate_synthetic(SyntheticConfig(
        atom_count=16, class_count=2, frames_per_class=2,
        seed=5)).frames[0].coords
    recon_exact = np.array_equal(model.reconstruct(frame)[0],
                                 reloaded.reconstruct(frame)[0])
    ok = metrics_same and params_exact and buffers_exact and recon_exact
    report(11, ok, f"metrics.csv byte-identical: {metrics_same}; checkpoint "
                   f"round trip bit-exact: {params_exact and buffers_exact}; "
                   f"reconstruction identical: {recon_exact}")
