"""Optimization loop, evaluation reports, checkpointing and transfer learning."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from conformer_forge import geometry
from conformer_forge.autodiff import Tape, backward
from conformer_forge.data import TrajectoryDataset
from conformer_forge.model import ChainAutoencoder, FrameInputs, ModelConfig

__all__ = [
    "AdamState",
    "EvalReport",
    "TrainConfig",
    "adam_step",
    "evaluate",
    "history_csv",
    "load_checkpoint",
    "save_checkpoint",
    "train_model",
    "transfer_fit",
]

THREADS_ENV = "CONFORMER_FORGE_THREADS"


class TrainingError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.995
    weight_decay: float = 5e-5
    epochs: int = 100
    batch_size: int = 64
    bond_penalty_weight: float = 0.5
    seed: int = 0
    use_intrinsic: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay <= 0 or self.weight_decay < 0:
            raise TrainingError("rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based epoch: lr * decay ** (epoch - 1)."""
        return self.lr * self.lr_decay ** (epoch - 1)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update with decoupled weight decay.

    Decay shrinks parameters directly before the Adam delta, keeping the
    penalty independent of gradient scale.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p in params:
        if p.grad.shape != p.value.shape:
            raise TrainingError(f"gradient shape mismatch for {p.name}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        if weight_decay > 0.0:
            p.value -= lr * weight_decay * p.value
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * p.grad
        v *= b2
        v += (1 - b2) * p.grad**2
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class EvalReport:
    mean_loss: float
    avg_l2: float
    contact_recovery: float
    mean_rmsd: float

    def as_dict(self) -> dict:
        return {
            "loss": self.mean_loss,
            "avg_l2": self.avg_l2,
            "contact_recovery": self.contact_recovery,
            "rmsd": self.mean_rmsd,
        }


def _prepare_frames(model: ChainAutoencoder, dataset: TrajectoryDataset,
                    indices) -> dict[int, FrameInputs]:
    return {int(i): model.prepare_frame(dataset.frames[int(i)].coords) for i in indices}


def _eval_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def train_model(model: ChainAutoencoder, dataset: TrajectoryDataset,
                config: TrainConfig,
                trainable: list | None = None) -> list[dict]:
    """Train in place; returns per-epoch history rows.

    ``trainable`` restricts the optimizer to a parameter subset (used by
    transfer learning); gradients still flow through frozen layers.
    """
    if dataset.splits is None:
        raise TrainingError("dataset has no split assignment")
    train_idx = dataset.splits.train
    if len(train_idx) == 0:
        raise TrainingError("empty train split")
    params = trainable if trainable is not None else model.parameters()

    cache = _prepare_frames(model, dataset, np.concatenate([train_idx, dataset.splits.val]))
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        order = train_idx[rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            model.zero_grad()
            # one block-diagonal graph per batch: normalization layers see
            # cross-frame statistics, and the tape is walked once per batch
            frames = [cache[int(i)] for i in batch]
            with Tape() as tape:
                loss, _ = model.batch_loss(
                    frames, training=True,
                    bond_penalty_weight=config.bond_penalty_weight)
            backward(tape, loss)
            epoch_loss += float(loss.value)
            inv = 1.0 / len(batch)
            for p in params:
                p.grad *= inv
            adam_step(params, state, lr, config.weight_decay)
        val_loss = _mean_loss(model, [cache[int(i)] for i in dataset.splits.val],
                              config.bond_penalty_weight)
        history.append({
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / len(order),
            "val_loss": val_loss,
        })
    return history


def _mean_loss(model: ChainAutoencoder, frames: list[FrameInputs],
               bond_penalty_weight: float) -> float:
    if not frames:
        return float("nan")
    total = 0.0
    for fi in frames:
        loss, _ = model.frame_loss(fi, training=False,
                                   bond_penalty_weight=bond_penalty_weight)
        total += float(loss.value)
    return total / len(frames)


def evaluate(model: ChainAutoencoder, dataset: TrajectoryDataset,
             split: str = "test", bond_penalty_weight: float = 0.5,
             contact_cutoff: float = 8.0) -> EvalReport:
    """Reconstruction metrics averaged over one split."""
    if dataset.splits is None:
        raise TrainingError("dataset has no split assignment")
    if split not in ("train", "val", "test"):
        raise TrainingError(f"unknown split {split!r}")
    indices = getattr(dataset.splits, split)
    if len(indices) == 0:
        raise TrainingError(f"empty split {split!r}")

    def one(i: int):
        coords = dataset.frames[int(i)].coords
        fi = model.prepare_frame(coords)
        loss, pred = model.frame_loss(fi, training=False,
                                      bond_penalty_weight=bond_penalty_weight)
        per_atom = np.linalg.norm(pred.value - fi.target, axis=1)
        _, rmsd = geometry.kabsch_rmsd(pred.value, fi.target)
        jac = geometry.contact_jaccard(fi.target, pred.value, contact_cutoff)
        return float(loss.value), float(per_atom.mean()), jac, rmsd

    workers = _eval_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, indices))
    else:
        rows = [one(i) for i in indices]
    rows = np.array(rows)
    return EvalReport(
        mean_loss=float(rows[:, 0].mean()),
        avg_l2=float(rows[:, 1].mean()),
        contact_recovery=float(rows[:, 2].mean()),
        mean_rmsd=float(rows[:, 3].mean()),
    )


# -- checkpoint persistence ------------------------------------------------

_REF_ENTRY = "reference_coords"


def save_checkpoint(model: ChainAutoencoder, path: str | Path) -> None:
    """Write manifest.json plus a flat little-endian f64 payload.

    The payload holds every parameter, every batchnorm running-stat buffer
    and the reference coordinates needed to rebuild the hierarchy.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0

    def put(name: str, kind: str, arr: np.ndarray):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({
            "name": name, "kind": kind,
            "shape": list(arr.shape), "offset": offset,
        })
        chunks.append(data.tobytes())
        offset += data.nbytes

    put(_REF_ENTRY, "buffer", model.reference_coords)
    for p in model.parameters():
        put(p.name, "param", p.value)
    for name, buf in model.named_buffers().items():
        put(name, "buffer", buf)

    payload = b"".join(chunks)
    cfg = model.config
    manifest = {
        "format_version": 1,
        "config": {
            "intrinsic_dim": cfg.intrinsic_dim,
            "extrinsic_dim": cfg.extrinsic_dim,
            "encoder_widths": list(cfg.encoder_widths),
            "decoder_widths": list(cfg.decoder_widths),
            "heads": cfg.heads,
            "levels": cfg.levels,
            "base_radius": cfg.base_radius,
            "contact_cutoff": cfg.contact_cutoff,
            "min_sep": cfg.min_sep,
            "use_intrinsic": cfg.use_intrinsic,
            "huber_delta": cfg.huber_delta,
        },
        "seed": model.seed,
        "atom_count": model.atom_count,
        "reference_hash": _sha256(model.reference_coords.astype("<f8").tobytes()),
        "payload_bytes": len(payload),
        "entries": entries,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    (path / "params.f64").write_bytes(payload)


def _sha256(data: bytes) -> str:
    import hashlib

    return hashlib.sha256(data).hexdigest()


def _read_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_file = path / "manifest.json"
    payload_file = path / "params.f64"
    if not manifest_file.is_file() or not payload_file.is_file():
        raise CheckpointError(f"incomplete checkpoint at {path}")
    with open(manifest_file, encoding="utf-8") as fh:
        manifest = json.load(fh)
    payload = payload_file.read_bytes()
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError("payload length does not match manifest")
    arrays = {}
    for entry in manifest["entries"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return manifest, arrays


def _config_from_manifest(manifest: dict) -> ModelConfig:
    c = manifest["config"]
    return ModelConfig(
        intrinsic_dim=c["intrinsic_dim"],
        extrinsic_dim=c["extrinsic_dim"],
        encoder_widths=tuple(c["encoder_widths"]),
        decoder_widths=tuple(c["decoder_widths"]),
        heads=c["heads"],
        levels=c["levels"],
        base_radius=c["base_radius"],
        contact_cutoff=c["contact_cutoff"],
        min_sep=c["min_sep"],
        use_intrinsic=c["use_intrinsic"],
        huber_delta=c["huber_delta"],
    )


def load_checkpoint(path: str | Path) -> ChainAutoencoder:
    """Rebuild a model; load∘save is the identity on every buffer."""
    path = Path(path)
    manifest, arrays = _read_checkpoint(path)
    config = _config_from_manifest(manifest)
    model = ChainAutoencoder(config, arrays[_REF_ENTRY], seed=manifest["seed"])
    named = model.named_parameters()
    buffers = model.named_buffers()
    for entry in manifest["entries"]:
        name = entry["name"]
        if name == _REF_ENTRY:
            continue
        if entry["kind"] == "param":
            if name not in named:
                raise CheckpointError(f"unknown parameter {name!r} in manifest")
            named[name].value = arrays[name]
        else:
            if name not in buffers:
                raise CheckpointError(f"unknown buffer {name!r} in manifest")
            buffers[name][...] = arrays[name]
    return model


# -- transfer learning -----------------------------------------------------

def transfer_fit(checkpoint_path: str | Path, dataset: TrajectoryDataset,
                 epochs: int = 10, seed: int = 0, baseline: bool = False,
                 filters: str = "both",
                 train_config: TrainConfig | None = None
                 ) -> tuple[ChainAutoencoder, EvalReport]:
    """Adapt a trained model to a new chain length.

    A fresh model is built for the new reference frame.  Unless ``baseline``
    is set, convolutional/attention/normalization filters are copied from
    the checkpoint (``filters`` selects the intrinsic branch, the extrinsic
    branch together with the mirrored decoder, or both).  Only the
    latent-to-decoder dense layer, whose shape depends on the chain, is
    trained.
    """
    if filters not in ("both", "intrinsic", "extrinsic"):
        raise TrainingError(f"unknown filter subset {filters!r}")
    if dataset.splits is None:
        raise TrainingError("dataset has no split assignment")
    path = Path(checkpoint_path)
    manifest, arrays = _read_checkpoint(path)
    config = _config_from_manifest(manifest)
    reference = dataset.frames[int(dataset.splits.train[0])].coords
    model = ChainAutoencoder(config, reference, seed=seed)

    transferable = {
        name: p for name, p in model.named_parameters().items()
        if not name.startswith("dec.dense_z")
    }
    if not baseline:
        for name, p in transferable.items():
            if filters == "intrinsic" and not name.startswith("enc_i."):
                continue
            if filters == "extrinsic" and not (
                    name.startswith("enc_e.") or name.startswith("dec.")):
                continue
            if name not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            if list(arrays[name].shape) != list(p.value.shape):
                raise CheckpointError(f"incompatible shape for {name!r}")
            p.value = arrays[name].copy()

    cfg = train_config or TrainConfig(epochs=epochs, seed=seed,
                                      use_intrinsic=config.use_intrinsic)
    train_model(model, dataset, cfg, trainable=model.dec_dense_z.parameters())
    report = evaluate(model, dataset, "test",
                      bond_penalty_weight=cfg.bond_penalty_weight)
    return model, report


def history_csv(history: list[dict]) -> str:
    """Metric history as CSV text: epoch, lr, train_loss, val_loss."""
    lines = ["epoch,lr,train_loss,val_loss"]
    for row in history:
        lines.append(f"{row['epoch']},{row['lr']!r},{row['train_loss']!r},{row['val_loss']!r}")
    return "\n".join(lines) + "\n"
