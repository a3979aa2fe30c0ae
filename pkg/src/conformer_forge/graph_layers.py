"""Graph NN building blocks: FPS hierarchy, radius graphs, edge-to-vertex
initialization, edge convolution, multi-head graph attention and pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from conformer_forge import autodiff as ad
from conformer_forge.autodiff import Parameter, Tensor

__all__ = [
    "EdgeConv",
    "GraphAttention",
    "GraphHierarchy",
    "build_hierarchy",
    "build_radius_graph",
    "downsample_signal",
    "edge_init_vertex_signal",
    "farthest_point_sample",
    "global_avg_pool",
    "upsample_signal",
]


class GraphError(ValueError):
    pass


def farthest_point_sample(points: np.ndarray, count: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point subset selection, in selection order.

    Starts at ``seed_index`` and repeatedly adds the point maximizing the
    minimum distance to the selected set; ties break to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if not 1 <= count <= m:
        raise GraphError(f"count {count} out of range for {m} points")
    selected = [seed_index]
    min_dist = np.linalg.norm(points - points[seed_index], axis=1)
    while len(selected) < count:
        nxt = int(np.argmax(min_dist))  # argmax picks the lowest index on ties
        selected.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(selected, dtype=np.int64)


def build_radius_graph(points: np.ndarray, radius: float) -> np.ndarray:
    """Directed edge list (src, dst): all pairs within ``radius`` plus self-loops."""
    if radius <= 0:
        raise GraphError("radius must be positive")
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    adj = dist <= radius
    np.fill_diagonal(adj, True)
    src, dst = np.nonzero(adj)
    return np.column_stack([src, dst]).astype(np.int64)


def _chain_edges(orig_indices: np.ndarray) -> np.ndarray:
    """Symmetric consecutive edges among retained vertices in chain order."""
    m = len(orig_indices)
    order = np.argsort(orig_indices)
    a, b = order[:-1], order[1:]
    return np.column_stack([
        np.concatenate([a, b]),
        np.concatenate([b, a]),
    ]).astype(np.int64)


@dataclass
class GraphHierarchy:
    """FPS-decimated vertex subsets shared by encoder and decoder.

    Level 0 holds all vertices; each following level halves the count
    (ceil).  Every level carries reference positions, a symmetric edge list
    with self-loops (radius graph united with the decimated chain edges so
    sparse levels stay connected), and links to the next level: ``sub_index``
    gives, for each level-(k+1) vertex, its row in level k; ``parent_pos``
    gives, for each level-k vertex, the row of its nearest retained vertex
    in level k+1.
    """

    level_indices: list = field(default_factory=list)  # original chain indices
    level_positions: list = field(default_factory=list)
    level_edges: list = field(default_factory=list)  # (E, 2) src/dst arrays
    radii: list = field(default_factory=list)
    sub_index: list = field(default_factory=list)
    parent_pos: list = field(default_factory=list)

    @property
    def levels(self) -> int:
        return len(self.level_indices)

    def level_size(self, k: int) -> int:
        return len(self.level_indices[k])


def build_hierarchy(reference_coords: np.ndarray, levels: int = 5,
                    base_radius: float = 2.5) -> GraphHierarchy:
    """Build the decimation hierarchy from a fixed reference frame.

    Level k uses radius ``base_radius * 2**k`` (the stride-2 downsampling
    doubles the neighborhood scale per level).
    """
    coords = np.asarray(reference_coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 2 ** (levels - 1):
        raise GraphError(f"chain of {n} vertices too short for {levels} levels")

    h = GraphHierarchy()
    indices = np.arange(n, dtype=np.int64)
    for k in range(levels):
        pos = coords[indices]
        radius = base_radius * (2.0 ** k)
        edges = build_radius_graph(pos, radius)
        edges = np.unique(np.vstack([edges, _chain_edges(indices)]), axis=0)
        h.level_indices.append(indices)
        h.level_positions.append(pos)
        h.level_edges.append(edges)
        h.radii.append(radius)
        if k < levels - 1:
            keep = math.ceil(len(indices) / 2)
            picked = farthest_point_sample(pos, keep, seed_index=0)
            picked_sorted = np.sort(picked)
            # nearest retained vertex at the next level, ties to lowest index
            dist = np.linalg.norm(pos[:, None, :] - pos[picked_sorted][None, :, :], axis=-1)
            h.sub_index.append(picked_sorted)
            h.parent_pos.append(np.argmin(dist, axis=1).astype(np.int64))
            indices = indices[picked_sorted]
    return h


def edge_init_vertex_signal(edge_signal: np.ndarray, edges: np.ndarray,
                            vertex_count: int, allow_isolated: bool = False) -> np.ndarray:
    """Vertex signal as the mean of signals on incident edges.

    ``edges`` are undirected pairs (i, j); the stored edge value counts
    toward both endpoints.  Isolated vertices are an error unless
    ``allow_isolated``, in which case they get zeros.
    """
    edge_signal = np.asarray(edge_signal, dtype=np.float64)
    if edge_signal.ndim == 1:
        edge_signal = edge_signal[:, None]
    out = np.zeros((vertex_count, edge_signal.shape[1]))
    counts = np.zeros(vertex_count)
    for col in (0, 1):
        np.add.at(out, edges[:, col], edge_signal)
        np.add.at(counts, edges[:, col], 1.0)
    if np.any(counts == 0):
        if not allow_isolated:
            raise GraphError("isolated vertex has no incident edges")
        counts = np.maximum(counts, 1.0)
    return out / counts[:, None]


def downsample_signal(features: Tensor, hierarchy: GraphHierarchy, level: int) -> Tensor:
    """Restrict level-k features to the retained level-(k+1) vertices."""
    if level >= hierarchy.levels - 1:
        raise GraphError("no coarser level to downsample to")
    return ad.gather_rows(features, hierarchy.sub_index[level])


def upsample_signal(features: Tensor, hierarchy: GraphHierarchy, level: int) -> Tensor:
    """Copy each level-k vertex's feature from its level-(k+1) parent."""
    if level >= hierarchy.levels - 1:
        raise GraphError("no coarser level to upsample from")
    return ad.gather_rows(features, hierarchy.parent_pos[level])


def global_avg_pool(features: Tensor) -> Tensor:
    """Arithmetic mean over vertices, kept as a (1, d) row."""
    return ad.reduce_mean(features, axis=0, keepdims=True)


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Per-row affine map."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.W = Parameter(f"{name}.W", _uniform_init(rng, d_in, (d_in, d_out)))
        self.b = Parameter(f"{name}.b", np.zeros(d_out))

    def parameters(self):
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)


class EdgeConv:
    """First-layer operator lifting an edge-defined signal to vertex features.

    h_i = W_self f0_i + b + mean over incident edges (i, j) of
    W_nb [f0_j || e_ij].  Self-loops do not contribute to the neighbor mean.
    """

    def __init__(self, name: str, d_vertex: int, d_edge: int, d_out: int,
                 rng: np.random.Generator):
        self.W_self = Parameter(f"{name}.W_self",
                                _uniform_init(rng, d_vertex, (d_vertex, d_out)))
        self.W_nb = Parameter(f"{name}.W_nb",
                              _uniform_init(rng, d_vertex + d_edge,
                                            (d_vertex + d_edge, d_out)))
        self.b = Parameter(f"{name}.b", np.zeros(d_out))

    def parameters(self):
        return [self.W_self, self.W_nb, self.b]

    def __call__(self, f0: Tensor, edge_feat: Tensor, edges: np.ndarray,
                 vertex_count: int) -> Tensor:
        """``edges`` are undirected pairs; each contributes in both directions."""
        own = ad.add(ad.matmul(f0, self.W_self), self.b)
        if edges.shape[0] == 0:
            return own
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        nb_in = ad.concat([ad.gather_rows(f0, src),
                           ad.concat([edge_feat, edge_feat], axis=0)], axis=1)
        msg = ad.segment_sum(ad.matmul(nb_in, self.W_nb), dst, vertex_count)
        counts = np.zeros(vertex_count)
        np.add.at(counts, dst, 1.0)
        counts = np.maximum(counts, 1.0)
        return ad.add(own, ad.div(msg, counts[:, None]))


class GraphAttention:
    """Multi-head graph attention over an explicit directed edge list.

    Scores e_ij = LeakyReLU(a_src . W h_i + a_dst . W h_j) are softmaxed
    over the in-neighbors of each vertex; head outputs are concatenated.
    The edge list must contain self-loops.
    """

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 heads: int = 4, slope: float = 0.2):
        if d_out % heads != 0:
            raise GraphError(f"output width {d_out} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_out // heads
        self.slope = slope
        self.W = Parameter(f"{name}.W", _uniform_init(rng, d_in, (d_in, d_out)))
        self.a_src = Parameter(f"{name}.a_src",
                               _uniform_init(rng, self.d_head, (heads, self.d_head)))
        self.a_dst = Parameter(f"{name}.a_dst",
                               _uniform_init(rng, self.d_head, (heads, self.d_head)))

    def parameters(self):
        return [self.W, self.a_src, self.a_dst]

    def __call__(self, x: Tensor, edges: np.ndarray, vertex_count: int) -> Tensor:
        src, dst = edges[:, 0], edges[:, 1]
        h = ad.reshape(ad.matmul(x, self.W), (vertex_count, self.heads, self.d_head))
        score_src = ad.reduce_sum(ad.mul(h, self.a_src), axis=2)  # (V, heads)
        score_dst = ad.reduce_sum(ad.mul(h, self.a_dst), axis=2)
        e = ad.leaky_relu(
            ad.add(ad.gather_rows(score_src, src), ad.gather_rows(score_dst, dst)),
            self.slope,
        )
        # segment softmax over dst; the max shift is a constant
        shift = np.full((vertex_count, self.heads), -np.inf)
        np.maximum.at(shift, dst, e.value)
        w = ad.exp(ad.sub(e, shift[dst]))
        denom = ad.segment_sum(w, dst, vertex_count)
        alpha = ad.div(w, ad.gather_rows(denom, dst))  # (E, heads)
        msg = ad.mul(ad.reshape(alpha, (len(src), self.heads, 1)), ad.gather_rows(h, src))
        out = ad.segment_sum(msg, dst, vertex_count)
        return ad.reshape(out, (vertex_count, self.heads * self.d_head))

    def attention_weights(self, x: Tensor, edges: np.ndarray,
                          vertex_count: int) -> np.ndarray:
        """Per-edge attention coefficients (E, heads), for inspection."""
        src, dst = edges[:, 0], edges[:, 1]
        h = (x.value @ self.W.value).reshape(vertex_count, self.heads, self.d_head)
        s = (h * self.a_src.value).sum(axis=2)
        t = (h * self.a_dst.value).sum(axis=2)
        e = s[src] + t[dst]
        e = np.where(e > 0, e, self.slope * e)
        shift = np.full((vertex_count, self.heads), -np.inf)
        np.maximum.at(shift, dst, e)
        w = np.exp(e - shift[dst])
        denom = np.zeros((vertex_count, self.heads))
        np.add.at(denom, dst, w)
        return w / denom[dst]
