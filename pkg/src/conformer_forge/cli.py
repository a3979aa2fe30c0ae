"""Command-line pipeline: synthesize data, train, evaluate, analyze,
interpolate and transfer.

Every run writes a ``run-manifest.json`` with the fully resolved
configuration, the seed and SHA-256 hashes of the inputs, so identical
manifests reproduce identical artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from conformer_forge import analysis, training
from conformer_forge.data import (
    DatasetError,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    split_dataset,
    write_dataset,
)
from conformer_forge.model import ModelConfig, init_model
from conformer_forge.training import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_model,
    transfer_fit,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dataset_hashes(path: Path) -> dict:
    return {
        "meta.json": _hash_file(path / "meta.json"),
        "coords.f32": _hash_file(path / "coords.f32"),
    }


def _write_manifest(outdir: Path, subcommand: str, config: dict, seed: int,
                    input_hashes: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in config.items() if k not in ("func", "subcommand")}
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "input_hashes": input_hashes,
    }
    with open(outdir / "run-manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_split_dataset(path: str, seed: int):
    ds = load_dataset(path)
    ds.splits = split_dataset(ds, seed=seed)
    return ds


def cmd_synth(args) -> int:
    config = SyntheticConfig(
        atom_count=args.atoms,
        class_count=args.classes,
        frames_per_class=args.frames_per_class,
        spacing=args.spacing,
        mode_amplitude=args.mode_amplitude,
        noise_sigma=args.noise_sigma,
        breath_amplitude=args.breath_amplitude,
        seed=args.seed,
    )
    dataset = generate_synthetic(config)
    out = Path(args.out)
    write_dataset(dataset, out)
    _write_manifest(out, "synth", vars(args) | {"out": str(out)}, args.seed, {})
    print(f"wrote {dataset.meta.frame_count} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data_path = Path(args.data)
    dataset = _load_split_dataset(args.data, args.seed)
    model_config = ModelConfig(contact_cutoff=args.cutoff,
                               use_intrinsic=not args.extrinsic_only)
    train_config = TrainConfig(
        lr=args.lr, lr_decay=args.lr_decay, weight_decay=args.weight_decay,
        epochs=args.epochs, batch_size=args.batch_size,
        bond_penalty_weight=args.lambda_bond, seed=args.seed,
        use_intrinsic=not args.extrinsic_only,
    )
    reference = dataset.frames[int(dataset.splits.train[0])].coords
    model = init_model(args.seed, reference, model_config)
    history = train_model(model, dataset, train_config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(training.history_csv(history), encoding="utf-8")
    save_checkpoint(model, out / "ckpt")
    _write_manifest(out, "train", vars(args) | {"out": str(out)}, args.seed,
                    _dataset_hashes(data_path))
    print(f"trained {args.epochs} epochs; final train loss "
          f"{history[-1]['train_loss']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = _load_split_dataset(args.data, args.seed)
    model = load_checkpoint(args.ckpt)
    report = evaluate(model, dataset, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.as_dict())
    _write_manifest(out, "eval", vars(args) | {"out": str(out)}, args.seed,
                    _dataset_hashes(Path(args.data)))
    print(json.dumps(report.as_dict()))
    return EXIT_OK


def _embeddings_csv(path: Path, intrinsic, extrinsic) -> None:
    ni = intrinsic.values.shape[1]
    ne = extrinsic.values.shape[1]
    header = (["frame", "label"]
              + [f"zi_{k}" for k in range(ni)]
              + [f"ze_{k}" for k in range(ne)])
    lines = [",".join(header)]
    for row in range(len(intrinsic.frame_indices)):
        cells = [str(intrinsic.frame_indices[row]), str(intrinsic.labels[row])]
        cells += [repr(v) for v in intrinsic.values[row]]
        cells += [repr(v) for v in extrinsic.values[row]]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_cca(args) -> int:
    dataset = _load_split_dataset(args.data, args.seed)
    model = load_checkpoint(args.ckpt)
    indices = getattr(dataset.splits, args.split)
    intrinsic, extrinsic = analysis.compute_embeddings(model, dataset, indices)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _embeddings_csv(out / "embeddings.csv", intrinsic, extrinsic)

    summary = {}
    if intrinsic.values.shape[1] > 0:
        cca = analysis.run_cca(intrinsic, extrinsic)
        summary["leading_correlation"] = cca.leading_correlation
        summary["correlations"] = cca.correlations.tolist()
    rng = np.random.default_rng(args.seed)
    tr_i, tr_e = analysis.compute_embeddings(
        model, dataset, _one_per_class(dataset, dataset.splits.train, rng))
    if intrinsic.values.shape[1] > 0:
        summary["one_shot_intrinsic_accuracy"] = analysis.one_shot_classifier(
            tr_i.values, tr_i.labels, intrinsic)
    summary["one_shot_extrinsic_accuracy"] = analysis.one_shot_classifier(
        tr_e.values, tr_e.labels, extrinsic)
    _write_json(out / "report.json", summary)
    _write_manifest(out, "cca", vars(args) | {"out": str(out)}, args.seed,
                    _dataset_hashes(Path(args.data)))
    print(json.dumps(summary))
    return EXIT_OK


def _one_per_class(dataset, pool, rng) -> np.ndarray:
    labels = dataset.labels()[pool]
    picks = []
    for cls in np.unique(labels):
        members = pool[labels == cls]
        picks.append(int(rng.choice(members)))
    return np.array(picks, dtype=np.int64)


def cmd_probe(args) -> int:
    dataset = _load_split_dataset(args.data, args.seed)
    model = load_checkpoint(args.ckpt)
    indices = getattr(dataset.splits, args.split)
    _, extrinsic = analysis.compute_embeddings(model, dataset, indices)
    values = dataset.property_values(args.property_name)[indices]
    latent = analysis.regression_probe(extrinsic, values, task=args.property_name)
    raw = analysis.raw_extrinsic_matrix(dataset, indices)
    pca = analysis.pca_baseline(raw, n_components=extrinsic.values.shape[1],
                                frame_indices=indices)
    baseline = analysis.regression_probe(pca, values, task=args.property_name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "property": args.property_name,
        "latent_error_sigma": latent.score,
        "pca_error_sigma": baseline.score,
    }
    _write_json(out / "report.json", summary)
    _write_manifest(out, "probe", vars(args) | {"out": str(out)}, args.seed,
                    _dataset_hashes(Path(args.data)))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_interp(args) -> int:
    dataset = _load_split_dataset(args.data, args.seed)
    model = load_checkpoint(args.ckpt)
    coords_a = dataset.frames[args.frame_a].coords
    coords_b = dataset.frames[args.frame_b].coords
    path = analysis.interpolate_latent(model, coords_a, coords_b, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["alpha,rmsd_to_a,rmsd_to_b"]
    for step, (_, ra, rb) in enumerate(path):
        alpha = step / (args.steps - 1)
        lines.append(f"{alpha!r},{ra!r},{rb!r}")
    (out / "interp_rmsd.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(out, "interp", vars(args) | {"out": str(out)}, args.seed,
                    _dataset_hashes(Path(args.data)))
    print(f"wrote {args.steps}-step interpolation to {out / 'interp_rmsd.csv'}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    dataset = _load_split_dataset(args.data, args.seed)
    model, report = transfer_fit(
        args.ckpt, dataset, epochs=args.epochs, seed=args.seed,
        baseline=args.baseline, filters=args.filters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "ckpt")
    _write_json(out / "report.json", report.as_dict()
                | {"baseline": args.baseline, "filters": args.filters})
    _write_manifest(out, "transfer", vars(args) | {"out": str(out)}, args.seed,
                    _dataset_hashes(Path(args.data)))
    print(json.dumps(report.as_dict()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conformer-forge",
        description="Geometric autoencoder pipeline for conformational ensembles.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled ensemble")
    p.add_argument("--atoms", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--frames-per-class", type=int, default=200)
    p.add_argument("--spacing", type=float, default=3.8)
    p.add_argument("--mode-amplitude", type=float, default=1.5)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--breath-amplitude", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.995)
    p.add_argument("--weight-decay", type=float, default=5e-5)
    p.add_argument("--lambda-bond", type=float, default=0.5)
    p.add_argument("--cutoff", type=float, default=8.0)
    p.add_argument("--extrinsic-only", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="reconstruction metrics on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="eval-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cca", help="latent correlation and one-shot accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="cca-out")
    p.set_defaults(func=cmd_cca)

    p = sub.add_parser("probe", help="property regression vs PCA baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--property", dest="property_name", default="molecular_weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="probe-out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("interp", help="decode the latent path between two frames")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frame-a", type=int, required=True)
    p.add_argument("--frame-b", type=int, required=True)
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="interp-out")
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("transfer", help="retrain the latent-to-decoder layer "
                                        "on a new ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--filters", choices=["both", "intrinsic", "extrinsic"],
                   default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (DatasetError, TrainingError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
