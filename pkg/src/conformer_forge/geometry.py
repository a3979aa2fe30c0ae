"""Graph construction, geometric signals, rigid alignment and metrics.

The chain is modeled with one vertex per residue.  Two edge sets matter:
the backbone graph (consecutive vertices) carrying oriented unit bond
vectors, and the contact graph (sequence-separated pairs within a distance
cutoff) carrying pair distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BackboneGraph",
    "ContactGraph",
    "RigidTransform",
    "build_backbone_graph",
    "build_contact_graph",
    "center_coords",
    "contact_jaccard",
    "extrinsic_signal",
    "intrinsic_signal",
    "kabsch_rmsd",
]

DEGENERATE_BOND = 1e-8


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneGraph:
    """Chain graph: edges (i, i+1) for i = 0..n-2."""

    vertex_count: int

    @property
    def edges(self) -> np.ndarray:
        i = np.arange(self.vertex_count - 1)
        return np.column_stack([i, i + 1])


@dataclass(frozen=True)
class ContactGraph:
    """Pairs (i, j), i < j, with j - i >= min_sep and distance <= cutoff."""

    vertex_count: int
    edges: np.ndarray  # (E, 2) int64, lexicographically sorted
    cutoff: float
    min_sep: int = 4

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """Proper rotation plus translation; maps P onto Q as R @ p + t."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise GeometryError("rotation is not orthogonal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation is not proper")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return coords @ self.rotation.T + self.translation


def build_backbone_graph(n: int) -> BackboneGraph:
    if n < 2:
        raise GeometryError("chain needs at least 2 vertices")
    return BackboneGraph(vertex_count=n)


def build_contact_graph(coords: np.ndarray, cutoff: float = 8.0,
                        min_sep: int = 4) -> ContactGraph:
    """Contact graph over residue centers.

    Edges are pairs (i, j) with j - i >= min_sep and pair distance <= cutoff,
    sorted lexicographically.
    """
    if cutoff <= 0:
        raise GeometryError("cutoff must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    i, j = np.triu_indices(n, k=min_sep)
    keep = dist[i, j] <= cutoff
    edges = np.column_stack([i[keep], j[keep]]).astype(np.int64)
    # triu_indices already yields lexicographic order
    return ContactGraph(vertex_count=n, edges=edges, cutoff=cutoff, min_sep=min_sep)


def intrinsic_signal(graph: ContactGraph, coords: np.ndarray) -> np.ndarray:
    """Scalar length per contact edge: the Euclidean endpoint distance."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != graph.vertex_count:
        raise GeometryError("atom count does not match graph")
    if graph.edge_count == 0:
        return np.zeros((0,))
    d = coords[graph.edges[:, 0]] - coords[graph.edges[:, 1]]
    return np.sqrt(np.sum(d**2, axis=1))


def extrinsic_signal(graph: BackboneGraph, coords: np.ndarray) -> np.ndarray:
    """Unit vector per backbone bond, oriented from lower to higher index."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != graph.vertex_count:
        raise GeometryError("atom count does not match graph")
    vec = coords[1:] - coords[:-1]
    norms = np.sqrt(np.sum(vec**2, axis=1))
    if np.any(norms < DEGENERATE_BOND):
        raise GeometryError("degenerate bond: coincident consecutive atoms")
    return vec / norms[:, None]


def center_coords(coords: np.ndarray) -> np.ndarray:
    """Translate coordinates so the centroid sits at the origin."""
    coords = np.asarray(coords, dtype=np.float64)
    return coords - coords.mean(axis=0)


def kabsch_rmsd(P: np.ndarray, Q: np.ndarray) -> tuple[RigidTransform, float]:
    """Optimal proper superposition of P onto Q and the residual RMSD.

    The rotation is the SVD solution of the cross-covariance with the
    reflection corrected by the sign of the determinant.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise GeometryError("point-count mismatch")
    if P.shape[0] < 3:
        raise GeometryError("need at least 3 points")
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - cp, Q - cq
    H = Pc.T @ Qc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = cq - R @ cp
    residual = Pc @ R.T - Qc
    rmsd = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    return RigidTransform(rotation=R, translation=t), rmsd


def contact_jaccard(true_coords: np.ndarray, pred_coords: np.ndarray,
                    cutoff: float = 8.0, min_sep: int = 4) -> float:
    """Jaccard index of the two contact sets; 1.0 when both are empty."""
    true_coords = np.asarray(true_coords, dtype=np.float64)
    pred_coords = np.asarray(pred_coords, dtype=np.float64)
    if true_coords.shape != pred_coords.shape:
        raise GeometryError("atom count mismatch")
    a = {tuple(e) for e in build_contact_graph(true_coords, cutoff, min_sep).edges}
    b = {tuple(e) for e in build_contact_graph(pred_coords, cutoff, min_sep).edges}
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)
