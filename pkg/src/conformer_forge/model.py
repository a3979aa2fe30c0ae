"""Full autoencoder assembly: intrinsic/extrinsic encoders, bounded latent
bottleneck, coordinate decoder and the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conformer_forge import autodiff as ad
from conformer_forge import geometry
from conformer_forge.autodiff import BatchNorm, Parameter, Tensor
from conformer_forge.graph_layers import (
    Dense,
    EdgeConv,
    GraphAttention,
    GraphHierarchy,
    build_hierarchy,
    edge_init_vertex_signal,
)

__all__ = ["ChainAutoencoder", "FrameInputs", "ModelConfig", "init_model"]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    intrinsic_dim: int = 16
    extrinsic_dim: int = 32
    encoder_widths: tuple = (12, 24, 48, 96, 96)
    decoder_widths: tuple = (128, 128, 64, 32, 16, 3)
    heads: int = 4
    levels: int = 5
    base_radius: float = 2.5
    contact_cutoff: float = 8.0
    min_sep: int = 4
    use_intrinsic: bool = True
    huber_delta: float = 2.0

    @property
    def latent_dim(self) -> int:
        return (self.intrinsic_dim if self.use_intrinsic else 0) + self.extrinsic_dim


@dataclass
class FrameInputs:
    """Per-frame constants consumed by the forward pass."""

    target: np.ndarray  # centered coordinates (n, 3)
    ext_signal: np.ndarray  # (n-1, 3) oriented unit bond vectors
    backbone_edges: np.ndarray  # (n-1, 2)
    f0_ext: np.ndarray  # (n, 3)
    contact_edges: np.ndarray  # (E, 2)
    int_signal: np.ndarray  # (E, 1)
    f0_int: np.ndarray  # (n, 1)
    contact_gat_edges: np.ndarray  # directed symmetric + self-loops
    true_bond_lengths: np.ndarray  # (n-1,)


def _directed_with_self_loops(edges: np.ndarray, n: int) -> np.ndarray:
    loops = np.column_stack([np.arange(n), np.arange(n)])
    if edges.shape[0] == 0:
        return loops.astype(np.int64)
    both = np.vstack([edges, edges[:, ::-1], loops])
    return np.unique(both, axis=0).astype(np.int64)


def _offset_edges(edges: np.ndarray, batch: int, stride: int) -> np.ndarray:
    """Block-diagonal edge list for ``batch`` stacked copies of one graph."""
    if batch == 1:
        return edges
    offsets = (np.arange(batch) * stride)[:, None, None]
    return (edges[None, :, :] + offsets).reshape(-1, 2)


def _offset_index(idx: np.ndarray, batch: int, stride: int) -> np.ndarray:
    if batch == 1:
        return idx
    return (idx[None, :] + (np.arange(batch) * stride)[:, None]).ravel()


class _BatchLayout:
    """Index plumbing for a fixed batch size over one shared hierarchy.

    A batch is processed as a single block-diagonal graph: frame b's
    vertices at level k live at rows [b*m_k, (b+1)*m_k).  Normalization
    layers then see statistics across the whole batch, so per-frame global
    scale survives them.
    """

    def __init__(self, model: "ChainAutoencoder", batch: int):
        h = model.hierarchy
        n = model.atom_count
        self.batch = batch
        self.backbone_edges = _offset_edges(
            geometry.build_backbone_graph(n).edges, batch, n)
        self.level_edges = [
            _offset_edges(h.level_edges[k], batch, h.level_size(k))
            for k in range(h.levels)
        ]
        self.sub_index = [
            _offset_index(h.sub_index[k], batch, h.level_size(k))
            for k in range(h.levels - 1)
        ]
        self.parent_pos = [
            _offset_index(h.parent_pos[k], batch, h.level_size(k + 1))
            for k in range(h.levels - 1)
        ]
        self.frame_of_vertex = np.repeat(np.arange(batch), n)
        top = h.level_size(h.levels - 1)
        self.frame_of_top_vertex = np.repeat(np.arange(batch), top)
        self.level_pos = [
            np.tile(pos, (batch, 1)) for pos in model._level_pos_centered
        ]
        self.bond_src = _offset_index(np.arange(n - 1), batch, n)
        self.bond_dst = self.bond_src + 1


class ChainAutoencoder:
    """Geometric autoencoder over a fixed-length 3D chain.

    The extrinsic encoder consumes oriented bond vectors through an
    edge-convolution layer and a stack of graph attention layers with
    FPS decimation; the intrinsic encoder consumes contact-edge lengths at
    full resolution.  Pooled features map to Tanh-bounded latent codes,
    which a mirrored attention decoder expands back to coordinates.
    """

    def __init__(self, config: ModelConfig, reference_coords: np.ndarray, seed: int):
        self.config = config
        self.seed = seed
        self.reference_coords = np.asarray(reference_coords, dtype=np.float64)
        n = self.reference_coords.shape[0]
        if n < 2 ** (config.levels - 1):
            raise ModelError(f"chain of {n} atoms too short for {config.levels} levels")
        self.atom_count = n
        self.hierarchy: GraphHierarchy = build_hierarchy(
            self.reference_coords, config.levels, config.base_radius)
        rng = np.random.default_rng(seed)
        self._build_layers(rng)
        self._layouts: dict[int, _BatchLayout] = {}

    # -- construction -----------------------------------------------------

    def _build_layers(self, rng: np.random.Generator):
        cfg = self.config
        w = cfg.encoder_widths
        heads = cfg.heads

        self.enc_e_conv = EdgeConv("enc_e.conv", 3, 3, w[0], rng)
        self.enc_e_bn = [BatchNorm(w[0], "enc_e.bn0")]
        self.enc_e_gat = []
        for k in range(1, len(w)):
            self.enc_e_gat.append(
                GraphAttention(f"enc_e.gat{k}", w[k - 1], w[k], rng, heads))
            self.enc_e_bn.append(BatchNorm(w[k], f"enc_e.bn{k}"))
        self.enc_e_dense = Dense("enc_e.dense", w[-1], cfg.extrinsic_dim, rng)

        if cfg.use_intrinsic:
            self.enc_i_conv = EdgeConv("enc_i.conv", 1, 1, w[0], rng)
            self.enc_i_bn = [BatchNorm(w[0], "enc_i.bn0")]
            self.enc_i_gat = []
            for k in range(1, len(w)):
                self.enc_i_gat.append(
                    GraphAttention(f"enc_i.gat{k}", w[k - 1], w[k], rng, heads))
                self.enc_i_bn.append(BatchNorm(w[k], f"enc_i.bn{k}"))
            self.enc_i_dense = Dense("enc_i.dense", w[-1], cfg.intrinsic_dim, rng)

        dw = cfg.decoder_widths
        coarse = self.hierarchy.level_size(cfg.levels - 1)
        self.dec_dense_z = Dense("dec.dense_z", cfg.latent_dim, coarse * dw[0], rng)
        self.dec_gat = []
        self.dec_bn = []
        # One attention layer per upsampled level, finest last.  Each layer
        # also sees the centered template positions of its level: parent-copy
        # upsampling duplicates rows, and without a symmetry-breaking input
        # sibling vertices would stay identical all the way to the output.
        self._dec_levels = list(range(cfg.levels - 2, -1, -1))
        centroid = self.reference_coords.mean(axis=0)
        self._level_pos_centered = [
            pos - centroid for pos in self.hierarchy.level_positions
        ]
        for i, level in enumerate(self._dec_levels):
            self.dec_gat.append(
                GraphAttention(f"dec.gat_l{level}", dw[i] + 3, dw[i + 1], rng,
                               cfg.heads))
            self.dec_bn.append(BatchNorm(dw[i + 1], f"dec.bn_l{level}"))
        self.dec_out = Dense("dec.out", dw[-2], dw[-1], rng)

    # -- parameter access -------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = []
        params += self.enc_e_conv.parameters()
        for gat in self.enc_e_gat:
            params += gat.parameters()
        for bn in self.enc_e_bn:
            params += bn.parameters()
        params += self.enc_e_dense.parameters()
        if self.config.use_intrinsic:
            params += self.enc_i_conv.parameters()
            for gat in self.enc_i_gat:
                params += gat.parameters()
            for bn in self.enc_i_bn:
                params += bn.parameters()
            params += self.enc_i_dense.parameters()
        params += self.dec_dense_z.parameters()
        for gat in self.dec_gat:
            params += gat.parameters()
        for bn in self.dec_bn:
            params += bn.parameters()
        params += self.dec_out.parameters()
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def batchnorms(self) -> list[BatchNorm]:
        bns = list(self.enc_e_bn)
        if self.config.use_intrinsic:
            bns += self.enc_i_bn
        bns += self.dec_bn
        return bns

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for bn in self.batchnorms():
            prefix = bn.gamma.name.rsplit(".", 1)[0]
            out[f"{prefix}.running_mean"] = bn.running_mean
            out[f"{prefix}.running_var"] = bn.running_var
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- per-frame input preparation --------------------------------------

    def prepare_frame(self, coords: np.ndarray) -> FrameInputs:
        coords = np.asarray(coords, dtype=np.float64)
        n = coords.shape[0]
        if n != self.atom_count:
            raise ModelError("frame length does not match model hierarchy")
        cfg = self.config
        backbone = geometry.build_backbone_graph(n)
        ext = geometry.extrinsic_signal(backbone, coords)
        bedges = backbone.edges
        f0_ext = edge_init_vertex_signal(ext, bedges, n)
        contact = geometry.build_contact_graph(coords, cfg.contact_cutoff, cfg.min_sep)
        ilen = geometry.intrinsic_signal(contact, coords)[:, None]
        f0_int = edge_init_vertex_signal(ilen, contact.edges, n, allow_isolated=True) \
            if contact.edge_count else np.zeros((n, 1))
        return FrameInputs(
            target=geometry.center_coords(coords),
            ext_signal=ext,
            backbone_edges=bedges,
            f0_ext=f0_ext,
            contact_edges=contact.edges,
            int_signal=ilen,
            f0_int=f0_int,
            contact_gat_edges=_directed_with_self_loops(contact.edges, n),
            true_bond_lengths=np.linalg.norm(coords[1:] - coords[:-1], axis=1),
        )

    # -- forward passes ----------------------------------------------------

    def _layout(self, batch: int) -> _BatchLayout:
        if batch not in self._layouts:
            self._layouts[batch] = _BatchLayout(self, batch)
        return self._layouts[batch]

    def _bn(self, bn: BatchNorm, x: Tensor, training: bool) -> Tensor:
        # single-row inputs fall back to the running-stats path
        return bn(x, training and x.value.shape[0] >= 2)

    def _mean_pool(self, x: Tensor, frame_ids: np.ndarray, batch: int,
                   rows_per_frame: int) -> Tensor:
        return ad.scale(ad.segment_sum(x, frame_ids, batch), 1.0 / rows_per_frame)

    def _encode_extrinsic(self, frames: list[FrameInputs], lay: _BatchLayout,
                          training: bool) -> Tensor:
        h = self.hierarchy
        n = self.atom_count
        B = lay.batch
        f0 = Tensor(np.concatenate([fi.f0_ext for fi in frames]))
        ef = Tensor(np.concatenate([fi.ext_signal for fi in frames]))
        x = self.enc_e_conv(f0, ef, lay.backbone_edges, B * n)
        x = ad.relu(self._bn(self.enc_e_bn[0], x, training))
        for k, gat in enumerate(self.enc_e_gat, start=1):
            x = ad.gather_rows(x, lay.sub_index[k - 1])
            x = gat(x, lay.level_edges[k], B * h.level_size(k))
            x = ad.relu(self._bn(self.enc_e_bn[k], x, training))
        top = h.level_size(h.levels - 1)
        pooled = self._mean_pool(x, lay.frame_of_top_vertex, B, top)
        return ad.tanh(self.enc_e_dense(pooled))

    def _encode_intrinsic(self, frames: list[FrameInputs], lay: _BatchLayout,
                          training: bool) -> Tensor:
        n = self.atom_count
        B = lay.batch
        f0 = Tensor(np.concatenate([fi.f0_int for fi in frames]))
        ef = Tensor(np.concatenate([fi.int_signal for fi in frames]))
        # contact graphs vary per frame, so their block edges are built here
        conv_edges = np.concatenate(
            [fi.contact_edges + b * n for b, fi in enumerate(frames)])
        gat_edges = np.concatenate(
            [fi.contact_gat_edges + b * n for b, fi in enumerate(frames)])
        x = self.enc_i_conv(f0, ef, conv_edges, B * n)
        x = ad.relu(self._bn(self.enc_i_bn[0], x, training))
        for k, gat in enumerate(self.enc_i_gat, start=1):
            x = gat(x, gat_edges, B * n)
            x = ad.relu(self._bn(self.enc_i_bn[k], x, training))
        pooled = self._mean_pool(x, lay.frame_of_vertex, B, n)
        return ad.tanh(self.enc_i_dense(pooled))

    def encode_batch(self, frames: list[FrameInputs],
                     training: bool = False) -> Tensor:
        """Latent codes (B, latent_dim): [intrinsic || extrinsic] per row."""
        lay = self._layout(len(frames))
        z_e = self._encode_extrinsic(frames, lay, training)
        if self.config.use_intrinsic:
            z_i = self._encode_intrinsic(frames, lay, training)
            return ad.concat([z_i, z_e], axis=1)
        return z_e

    def encode_prepared(self, fi: FrameInputs, training: bool = False) -> Tensor:
        return self.encode_batch([fi], training)

    def decode_latent(self, z: Tensor, training: bool = False) -> Tensor:
        """Predicted centered coordinates (B*n, 3) from latent codes (B, d)."""
        h = self.hierarchy
        cfg = self.config
        B = z.value.shape[0]
        lay = self._layout(B)
        coarse = h.level_size(cfg.levels - 1)
        x = ad.reshape(self.dec_dense_z(z), (B * coarse, cfg.decoder_widths[0]))
        for i, level in enumerate(self._dec_levels):
            x = ad.gather_rows(x, lay.parent_pos[level])
            x = ad.concat([x, Tensor(lay.level_pos[level])], axis=1)
            x = self.dec_gat[i](x, lay.level_edges[level],
                                B * h.level_size(level))
            x = ad.relu(self._bn(self.dec_bn[i], x, training))
        # predict displacements from the centered template; the chain spans
        # orders of magnitude more than one conformational step, so decoding
        # absolute coordinates would spend the whole budget learning scale
        return ad.add(self.dec_out(x), Tensor(lay.level_pos[0]))

    def batch_loss(self, frames: list[FrameInputs], training: bool = True,
                   bond_penalty_weight: float = 0.5) -> tuple[Tensor, Tensor]:
        """Summed loss over a batch and the stacked predictions (B*n, 3)."""
        lay = self._layout(len(frames))
        z = self.encode_batch(frames, training)
        pred = self.decode_latent(z, training)
        targets = np.concatenate([fi.target for fi in frames])
        resid = ad.sub(pred, targets)
        data_term = ad.reduce_sum(ad.huber(resid, self.config.huber_delta))
        bonds = ad.sub(ad.gather_rows(pred, lay.bond_dst),
                       ad.gather_rows(pred, lay.bond_src))
        # tiny floor keeps the length gradient finite for degenerate predictions
        sumsq = ad.add(ad.reduce_sum(ad.mul(bonds, bonds), axis=1),
                       np.full(len(lay.bond_src), 1e-12))
        lengths = ad.sqrt(sumsq)
        true_lengths = np.concatenate([fi.true_bond_lengths for fi in frames])
        dev = ad.sub(lengths, true_lengths)
        # per-frame mean deviation, summed over the batch
        penalty = ad.scale(ad.reduce_mean(ad.mul(dev, dev)), len(frames))
        loss = ad.add(data_term, ad.scale(penalty, bond_penalty_weight))
        return loss, pred

    def loss_terms(self, pred: Tensor, fi: FrameInputs,
                   bond_penalty_weight: float = 0.5) -> Tensor:
        """Coordinate Huber loss plus weighted bond-length deviation penalty."""
        resid = ad.sub(pred, fi.target)
        data_term = ad.reduce_sum(ad.huber(resid, self.config.huber_delta))
        n = self.atom_count
        bonds = ad.sub(ad.gather_rows(pred, np.arange(1, n)),
                       ad.gather_rows(pred, np.arange(n - 1)))
        sumsq = ad.add(ad.reduce_sum(ad.mul(bonds, bonds), axis=1),
                       np.full(n - 1, 1e-12))
        lengths = ad.sqrt(sumsq)
        dev = ad.sub(lengths, fi.true_bond_lengths)
        penalty = ad.reduce_mean(ad.mul(dev, dev))
        return ad.add(data_term, ad.scale(penalty, bond_penalty_weight))

    def frame_loss(self, fi: FrameInputs, training: bool = True,
                   bond_penalty_weight: float = 0.5) -> tuple[Tensor, Tensor]:
        return self.batch_loss([fi], training, bond_penalty_weight)

    # -- convenience numpy API (eval mode, no tape) ------------------------

    def encode(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent codes (z_intrinsic, z_extrinsic) for one frame; z_intrinsic
        is empty when the model is extrinsic-only."""
        fi = self.prepare_frame(coords)
        lay = self._layout(1)
        z_e = self._encode_extrinsic([fi], lay, training=False).value.ravel()
        if self.config.use_intrinsic:
            z_i = self._encode_intrinsic([fi], lay, training=False).value.ravel()
        else:
            z_i = np.zeros(0)
        return z_i, z_e

    def decode(self, code: np.ndarray) -> np.ndarray:
        code = np.asarray(code, dtype=np.float64).reshape(1, -1)
        if code.shape[1] != self.config.latent_dim:
            raise ModelError("latent code has wrong dimension")
        return self.decode_latent(Tensor(code), training=False).value

    def reconstruct(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Decode(encode(frame)): predicted coords, per-atom L2 errors, RMSD."""
        z_i, z_e = self.encode(coords)
        pred = self.decode(np.concatenate([z_i, z_e]))
        target = geometry.center_coords(coords)
        per_atom = np.linalg.norm(pred - target, axis=1)
        _, rmsd = geometry.kabsch_rmsd(pred, target)
        return pred, per_atom, rmsd


def init_model(seed: int, reference_coords: np.ndarray,
               config: ModelConfig | None = None) -> ChainAutoencoder:
    """Deterministically initialized model with the hierarchy built from the
    reference frame."""
    return ChainAutoencoder(config or ModelConfig(), reference_coords, seed)
