"""Dataset ingestion, synthetic ensemble generation and deterministic splitting.

A dataset on disk is a directory with two files:

``meta.json``
    UTF-8 JSON header with atom/frame counts, per-atom annotations,
    per-frame labels and named per-frame scalar properties.
``coords.f32``
    Little-endian 32-bit floats, frame-major then atom-major then
    (x, y, z); exactly ``4 * frame_count * atom_count * 3`` bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ConformationFrame",
    "DatasetMeta",
    "SplitAssignment",
    "SyntheticConfig",
    "TrajectoryDataset",
    "generate_synthetic",
    "load_dataset",
    "split_dataset",
    "write_dataset",
]

MIN_ATOMS = 5


class DatasetError(ValueError):
    """Raised for malformed dataset directories or invalid configurations."""


@dataclass(frozen=True)
class ConformationFrame:
    """One chain conformation: ordered 3D coordinates in Angstrom."""

    coords: np.ndarray  # (n_atoms, 3) float64
    frame_index: int
    label_id: int
    properties: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DatasetError(f"coords must be (n, 3), got {coords.shape}")
        if coords.shape[0] < MIN_ATOMS:
            raise DatasetError(f"need at least {MIN_ATOMS} atoms, got {coords.shape[0]}")
        if not np.all(np.isfinite(coords)):
            raise DatasetError("non-finite coordinates")
        object.__setattr__(self, "coords", coords)

    @property
    def atom_count(self) -> int:
        return self.coords.shape[0]


@dataclass
class DatasetMeta:
    atom_count: int
    frame_count: int
    residue_index: np.ndarray  # per-atom, nondecreasing
    chain_id: np.ndarray  # per-atom
    label_names: list[str]
    property_names: list[str]
    units: str = "angstrom"

    def __post_init__(self):
        self.residue_index = np.asarray(self.residue_index, dtype=np.int64)
        self.chain_id = np.asarray(self.chain_id, dtype=np.int64)
        if len(self.residue_index) != self.atom_count:
            raise DatasetError("residue_index length != atom_count")
        if len(self.chain_id) != self.atom_count:
            raise DatasetError("chain_id length != atom_count")
        if np.any(np.diff(self.residue_index) < 0):
            raise DatasetError("residue_index must be nondecreasing")


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/val/test frame-index lists, reproducible from a seed."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        all_idx = np.concatenate([self.train, self.val, self.test])
        if len(np.unique(all_idx)) != len(all_idx):
            raise DatasetError("split index lists overlap")


@dataclass
class TrajectoryDataset:
    meta: DatasetMeta
    frames: list[ConformationFrame]
    splits: SplitAssignment | None = None

    def __post_init__(self):
        if len(self.frames) != self.meta.frame_count:
            raise DatasetError("frame_count does not match number of frames")
        counts = {f.atom_count for f in self.frames}
        if counts and counts != {self.meta.atom_count}:
            raise DatasetError("frames disagree on atom count")

    def coords_array(self) -> np.ndarray:
        """All coordinates as one (frame_count, atom_count, 3) array."""
        return np.stack([f.coords for f in self.frames])

    def labels(self) -> np.ndarray:
        return np.array([f.label_id for f in self.frames], dtype=np.int64)

    def property_values(self, name: str) -> np.ndarray:
        return np.array([f.properties[name] for f in self.frames], dtype=np.float64)


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration for the helix-plus-modes ensemble generator.

    Each class k carries a smooth displacement mode field (the linearized
    rotation about a class-specific axis), entered with amplitude
    ``mode_amplitude * sin(omega * t + phase_k)``.  ``breath_amplitude``
    optionally adds a class-independent uniform scaling oscillation, which
    perturbs pairwise distances while leaving bond orientations untouched.
    """

    atom_count: int
    class_count: int
    frames_per_class: int
    spacing: float = 3.8
    mode_amplitude: float = 1.5
    noise_sigma: float = 0.1
    breath_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.atom_count < MIN_ATOMS:
            raise DatasetError("atom_count too small")
        if self.class_count < 2:
            raise DatasetError("need at least 2 classes")
        if self.frames_per_class < 1:
            raise DatasetError("frames_per_class must be positive")
        if self.mode_amplitude < 0 or self.noise_sigma < 0 or self.breath_amplitude < 0:
            raise DatasetError("amplitudes must be nonnegative")
        if self.spacing <= 0:
            raise DatasetError("spacing must be positive")


# Per-class property scalars: fixed affine functions of the class id, so
# linear probes on a class-separating embedding are learnable.
PROPERTY_SLOPES = {
    "molecular_weight": (250.0, 40.0),
    "hbd_count": (2.0, 1.0),
    "tpsa": (60.0, 15.0),
}


def _meta_path(path: Path) -> Path:
    return path / "meta.json"


def _coords_path(path: Path) -> Path:
    return path / "coords.f32"


def load_dataset(path: str | Path) -> TrajectoryDataset:
    """Load a dataset directory, decoding coordinates bit-exactly."""
    path = Path(path)
    meta_file, coords_file = _meta_path(path), _coords_path(path)
    if not meta_file.is_file():
        raise DatasetError(f"missing {meta_file}")
    if not coords_file.is_file():
        raise DatasetError(f"missing {coords_file}")

    with open(meta_file, encoding="utf-8") as fh:
        raw = json.load(fh)
    meta = DatasetMeta(
        atom_count=int(raw["atom_count"]),
        frame_count=int(raw["frame_count"]),
        residue_index=raw["residue_index"],
        chain_id=raw["chain_id"],
        label_names=list(raw["label_names"]),
        property_names=list(raw["properties"].keys()),
        units=raw.get("units", "angstrom"),
    )

    payload = coords_file.read_bytes()
    expected = 4 * meta.frame_count * meta.atom_count * 3
    if len(payload) != expected:
        raise DatasetError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise DatasetError("non-finite values in coords.f32")
    coords = flat.reshape(meta.frame_count, meta.atom_count, 3)

    labels = [int(v) for v in raw["labels"]]
    if len(labels) != meta.frame_count:
        raise DatasetError("labels length != frame_count")
    props = {k: [float(x) for x in v] for k, v in raw["properties"].items()}
    for name, values in props.items():
        if len(values) != meta.frame_count:
            raise DatasetError(f"property {name!r} length != frame_count")

    frames = [
        ConformationFrame(
            coords=coords[t],
            frame_index=t,
            label_id=labels[t],
            properties={k: props[k][t] for k in props},
        )
        for t in range(meta.frame_count)
    ]
    return TrajectoryDataset(meta=meta, frames=frames)


def write_dataset(dataset: TrajectoryDataset, path: str | Path) -> None:
    """Write a dataset directory; ``load_dataset`` inverts it exactly."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dataset.meta
    header = {
        "atom_count": meta.atom_count,
        "frame_count": meta.frame_count,
        "residue_index": meta.residue_index.tolist(),
        "chain_id": meta.chain_id.tolist(),
        "labels": [int(f.label_id) for f in dataset.frames],
        "label_names": list(meta.label_names),
        "properties": {
            name: [float(f.properties[name]) for f in dataset.frames]
            for name in meta.property_names
        },
        "units": meta.units,
    }
    with open(_meta_path(path), "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    flat = dataset.coords_array().astype("<f4")
    _coords_path(path).write_bytes(flat.tobytes())


def base_helix(atom_count: int, spacing: float, radius: float = 2.3,
               turn_deg: float = 100.0) -> np.ndarray:
    """Regular helix with exact consecutive-atom spacing.

    The rise per atom is solved from the spacing and in-plane chord so that
    consecutive atoms are exactly ``spacing`` apart.
    """
    theta = math.radians(turn_deg)
    chord = 2.0 * radius * math.sin(theta / 2.0)
    if chord >= spacing:
        raise DatasetError("helix chord exceeds requested spacing")
    rise = math.sqrt(spacing**2 - chord**2)
    i = np.arange(atom_count)
    return np.column_stack([
        radius * np.cos(i * theta),
        radius * np.sin(i * theta),
        rise * i,
    ])


def _class_mode_fields(base: np.ndarray, class_count: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Per-class smooth displacement modes: linearized rotations about
    class-specific axes, RMS-normalized, pairwise cosine similarity < 0.9."""
    centered = base - base.mean(axis=0)
    modes = []
    for _ in range(class_count):
        for _attempt in range(1000):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            mode = np.cross(axis, centered)
            mode /= np.sqrt(np.mean(np.sum(mode**2, axis=1)))
            flat = mode.ravel()
            ok = all(
                abs(np.dot(flat, m.ravel())) / (np.linalg.norm(flat) * np.linalg.norm(m.ravel())) < 0.9
                for m in modes
            )
            if ok:
                modes.append(mode)
                break
        else:
            raise DatasetError("could not draw sufficiently distinct class modes")
    return np.stack(modes)


def generate_synthetic(config: SyntheticConfig) -> TrajectoryDataset:
    """Generate a labeled helix-plus-modes conformational ensemble."""
    rng = np.random.default_rng(config.seed)
    n, K, F = config.atom_count, config.class_count, config.frames_per_class
    base = base_helix(n, config.spacing)
    modes = _class_mode_fields(base, K, rng)
    centroid = base.mean(axis=0)

    # Quarter period per class so each class sweeps a distinct arc of the
    # shared oscillation; phases spread the arcs around the circle.
    omega = (math.pi / 2.0) / F
    phases = 2.0 * math.pi * np.arange(K) / K

    frames = []
    idx = 0
    for k in range(K):
        props_k = {name: a + b * k for name, (a, b) in PROPERTY_SLOPES.items()}
        for t in range(F):
            amp = config.mode_amplitude * math.sin(omega * t + phases[k])
            coords = base + amp * modes[k]
            if config.breath_amplitude > 0.0:
                scale = 1.0 + config.breath_amplitude * math.sin(2.0 * math.pi * 3.0 * t / F)
                coords = centroid + scale * (coords - centroid)
            if config.noise_sigma > 0.0:
                coords = coords + rng.normal(scale=config.noise_sigma, size=coords.shape)
            frames.append(ConformationFrame(
                coords=coords, frame_index=idx, label_id=k, properties=props_k,
            ))
            idx += 1

    meta = DatasetMeta(
        atom_count=n,
        frame_count=K * F,
        residue_index=np.arange(n),
        chain_id=np.zeros(n, dtype=np.int64),
        label_names=[f"class_{k}" for k in range(K)],
        property_names=list(PROPERTY_SLOPES.keys()),
    )
    return TrajectoryDataset(meta=meta, frames=frames)


def split_dataset(dataset: TrajectoryDataset,
                  fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
                  seed: int = 0) -> SplitAssignment:
    """Deterministic train/val/test split by seeded shuffle.

    Sizes are floor allocations of the fractions; the remainder goes to train.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError("fractions must sum to 1")
    n = dataset.meta.frame_count
    if n < 3:
        raise DatasetError("need at least 3 frames to split")
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    return SplitAssignment(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train:n_train + n_val]),
        test=np.sort(perm[n_train + n_val:]),
        seed=seed,
    )
