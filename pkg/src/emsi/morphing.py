"""Deform the air part of the Eulerian mesh so it follows the body.

Anchor ("fixed") nodes are the body nodes and the outer boundary.  Each free
air node is located once in a Delaunay triangulation of the initial anchor
positions; afterwards its position is the barycentric combination of the
moved anchors of its simplex.  Connectivity never changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import Delaunay, QhullError

from .mesh import Mesh, MeshError, SubMeshMap

# Tolerances for point location
WEIGHT_TOL = 1e-10
OUTSIDE_TOL = 1e-8


class MorphError(MeshError):
    """A free node cannot be located inside the anchor hull."""


@dataclass
class MorphOperator:
    """Barycentric coordinates of free nodes with respect to anchor simplices."""

    n_nodes: int
    fixed_ids: NDArray[np.int64]
    free_ids: NDArray[np.int64]
    tris: NDArray[np.int64]
    containing_simplex: NDArray[np.int64]
    bary_weights: NDArray[np.float64]
    fallback_count: int = 0
    fixed_ref: NDArray[np.float64] | None = None
    free_ref: NDArray[np.float64] | None = None

    @property
    def n_free(self) -> int:
        return self.free_ids.size

    def anchors_of_free(self) -> NDArray[np.int64]:
        """Anchor node ids (full-mesh numbering) used by each free node."""
        if self.n_free == 0:
            return np.zeros((0, self.tris.shape[1] if self.tris.size else 0), dtype=np.int64)
        return self.fixed_ids[self.tris[self.containing_simplex]]


def fixed_nodes(mesh: Mesh, submap: SubMeshMap | None) -> NDArray[np.int64]:
    """Body nodes together with the outer boundary nodes."""
    ids = [mesh.boundary_nodes()]
    if submap is not None:
        ids.append(submap.parent_node_of_child)
    return np.unique(np.concatenate(ids))


def _barycentric(tri: Delaunay, simplex: NDArray[np.int64], pts: NDArray[np.float64]) -> NDArray[np.float64]:
    d = pts.shape[1]
    T = tri.transform[simplex]
    b = np.einsum("nij,nj->ni", T[:, :d], pts - T[:, d])
    return np.concatenate([b, 1.0 - b.sum(axis=1, keepdims=True)], axis=1)


def build(mesh: Mesh, submap: SubMeshMap | None = None, fixed: NDArray[np.int64] | None = None) -> MorphOperator:
    """Locate every free node in a triangulation of the anchor positions."""
    fixed_ids = fixed_nodes(mesh, submap) if fixed is None else np.unique(np.asarray(fixed, dtype=np.int64))
    free = np.ones(mesh.n_nodes, dtype=bool)
    free[fixed_ids] = False
    free_ids = np.flatnonzero(free)
    d = mesh.dim
    if free_ids.size == 0:
        return MorphOperator(mesh.n_nodes, fixed_ids, free_ids, np.zeros((0, d + 1), dtype=np.int64),
                             np.zeros(0, dtype=np.int64), np.zeros((0, d + 1)))
    anchors = mesh.nodes[fixed_ids]
    try:
        tri = Delaunay(anchors)
    except QhullError as exc:
        raise MorphError(f"anchor triangulation failed: {exc}") from None
    pts = mesh.nodes[free_ids]
    simplex = tri.find_simplex(pts)
    weights = np.zeros((free_ids.size, d + 1))
    found = simplex >= 0
    if np.any(found):
        weights[found] = _barycentric(tri, simplex[found], pts[found])
    lost = np.flatnonzero(~found)
    for k in lost:
        # best simplex: the one whose smallest barycentric weight is largest
        allw = _barycentric(tri, np.arange(tri.nsimplex), np.repeat(pts[k][None], tri.nsimplex, axis=0))
        best = int(np.argmax(allw.min(axis=1)))
        w = allw[best]
        if w.min() < -OUTSIDE_TOL:
            raise MorphError(f"free node {int(free_ids[k])} lies outside the hull of the anchor nodes")
        simplex[k] = best
        weights[k] = w
    # clip round-off negatives and renormalize
    weights = np.where(weights < 0.0, np.maximum(weights, 0.0), weights)
    weights /= weights.sum(axis=1, keepdims=True)
    return MorphOperator(mesh.n_nodes, fixed_ids, free_ids, tri.simplices.astype(np.int64), simplex.astype(np.int64),
                         weights, int(lost.size), anchors.copy(), pts.copy())


def morph(op: MorphOperator, nodes: NDArray[np.float64], new_fixed_positions: NDArray[np.float64]) -> NDArray[np.float64]:
    """New coordinates: anchors as given, free nodes interpolated.

    ``nodes`` supplies the array shape (and is not modified);
    ``new_fixed_positions`` has one row per entry of ``op.fixed_ids``.
    Free nodes move by the interpolated anchor displacement, so anchors at
    their initial positions leave every node exactly where it was.
    """
    new_fixed_positions = np.asarray(new_fixed_positions, dtype=np.float64)
    if new_fixed_positions.shape != (op.fixed_ids.size, nodes.shape[1]):
        raise ValueError(f"expected {op.fixed_ids.size} anchor positions of dimension {nodes.shape[1]}")
    out = np.array(nodes, dtype=np.float64, copy=True)
    out[op.fixed_ids] = new_fixed_positions
    if op.n_free:
        shift = new_fixed_positions - op.fixed_ref
        corners = shift[op.tris[op.containing_simplex]]  # (nf, d+1, d)
        out[op.free_ids] = op.free_ref + np.einsum("na,nad->nd", op.bary_weights, corners)
    return out


def mesh_velocity(X_new: NDArray[np.float64], X_old: NDArray[np.float64], dt: float) -> NDArray[np.float64]:
    """``w = (X_new - X_old) / dt``."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    return (np.asarray(X_new) - np.asarray(X_old)) / dt


@dataclass
class QualityReport:
    min_ratio: float
    inverted: int
    worst_cell: int


def quality_report(mesh: Mesh, nodes: NDArray[np.float64], reference: NDArray[np.float64] | None = None) -> QualityReport:
    """Smallest ratio of signed volume to reference volume and inverted-cell count."""
    ref = mesh.signed_volumes(mesh.nodes if reference is None else reference)
    cur = mesh.signed_volumes(nodes)
    ratio = cur / ref
    worst = int(np.argmin(ratio))
    return QualityReport(float(ratio[worst]), int(np.count_nonzero(cur <= 0.0)), worst)
