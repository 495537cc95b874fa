"""Unstructured simplex meshes (triangles in 2D, tetrahedra in 3D).

A :class:`Mesh` stores node coordinates, cell connectivity with one integer
region marker per cell, and a list of marked facets (boundary or interface
edges/triangles).  Material regions are pulled out as child meshes through
:func:`extract_submesh`, which keeps the index maps needed to move nodal data
between the whole domain and the body.

Mesh files use a small ASCII format::

    # comment
    emsimesh <dim> <n_nodes> <n_cells> <n_facets>
    x y [z]                 # n_nodes lines
    v0 v1 v2 [v3] region    # n_cells lines
    v0 v1 [v2] marker       # n_facets lines

Example:
    >>> mesh = load_mesh("plate.msh")
    >>> body = extract_submesh(mesh, region=1)
    >>> body.child.n_cells <= mesh.n_cells
    True
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from numpy.typing import NDArray

# Marker given to child-mesh facets that have no marker in the parent list.
UNMARKED = 0
# Jacobians with a worse condition number are treated as degenerate.
MAX_CONDITION = 1e12


class MeshError(ValueError):
    """Raised for malformed mesh files and invalid mesh data."""


@dataclass
class Mesh:
    """Simplex mesh with region and facet markers.

    Attributes:
        dim: Spatial dimension, 2 or 3.
        nodes: Coordinates, shape ``(n_nodes, dim)``.  Replaced wholesale by
            the morphing step; everything else is fixed after construction.
        cells: Connectivity, shape ``(n_cells, dim + 1)``, positively oriented.
        cell_region: Integer region marker per cell.
        facets: Marked facets, shape ``(n_facets, dim)``.
        facet_marker: Integer marker per listed facet.
        reoriented: Number of cells whose node order was flipped on load.
    """

    dim: int
    nodes: NDArray[np.float64]
    cells: NDArray[np.int64]
    cell_region: NDArray[np.int64]
    facets: NDArray[np.int64] = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    facet_marker: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    reoriented: int = 0

    def __post_init__(self) -> None:
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        self.cell_region = np.ascontiguousarray(self.cell_region, dtype=np.int64)
        self.facets = np.ascontiguousarray(self.facets, dtype=np.int64).reshape(-1, self.dim)
        self.facet_marker = np.ascontiguousarray(self.facet_marker, dtype=np.int64)
        self._topology: _Topology | None = None

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_facets(self) -> int:
        return self.facets.shape[0]

    def copy(self) -> Mesh:
        return Mesh(
            self.dim,
            self.nodes.copy(),
            self.cells.copy(),
            self.cell_region.copy(),
            self.facets.copy(),
            self.facet_marker.copy(),
            self.reoriented,
        )

    def signed_volumes(self, nodes: NDArray[np.float64] | None = None) -> NDArray[np.float64]:
        """Signed cell volumes (areas in 2D) for the stored node ordering."""
        x = self.nodes if nodes is None else nodes
        return _signed_volumes(x, self.cells)

    def volumes(self) -> NDArray[np.float64]:
        return np.abs(self.signed_volumes())

    def topology(self) -> _Topology:
        """Facet-to-cell adjacency, computed once (connectivity never changes)."""
        if self._topology is None:
            self._topology = _build_topology(self.cells, self.dim)
        return self._topology

    def boundary_nodes(self) -> NDArray[np.int64]:
        """Sorted ids of nodes lying on the outer boundary."""
        topo = self.topology()
        outer = topo.facet_nodes[topo.facet_cells[:, 1] < 0]
        return np.unique(outer)

    def boundary_facets(self) -> NDArray[np.int64]:
        """Facets with a single adjacent cell, shape ``(n, dim)``."""
        topo = self.topology()
        return topo.facet_nodes[topo.facet_cells[:, 1] < 0]

    def facets_with_marker(self, marker: int) -> NDArray[np.int64]:
        return self.facets[self.facet_marker == marker]

    def validate(self) -> None:
        """Check the mesh invariants, raising :class:`MeshError` on violation."""
        if self.dim not in (2, 3):
            raise MeshError(f"dimension must be 2 or 3, got {self.dim}")
        if self.nodes.ndim != 2 or self.nodes.shape[1] != self.dim:
            raise MeshError(f"nodes must have shape (n, {self.dim})")
        if self.cells.ndim != 2 or self.cells.shape[1] != self.dim + 1:
            raise MeshError(f"cells must have shape (n, {self.dim + 1})")
        if self.cell_region.shape != (self.n_cells,):
            raise MeshError("one region marker per cell required")
        if self.facet_marker.shape != (self.n_facets,):
            raise MeshError("one marker per facet required")
        for name, ids in (("cell", self.cells), ("facet", self.facets)):
            if ids.size and (ids.min() < 0 or ids.max() >= self.n_nodes):
                row = int(np.argmax(np.any((ids < 0) | (ids >= self.n_nodes), axis=1)))
                raise MeshError(f"{name} {row} references a missing node")
        vol = self.signed_volumes()
        bad = np.flatnonzero(vol <= 0.0)
        if bad.size:
            raise MeshError(f"cell {int(bad[0])} has nonpositive volume {vol[bad[0]]:.3e}")
        if self.n_facets:
            topo = self.topology()
            keys = np.sort(self.facets, axis=1)
            idx = topo.lookup(keys)
            missing = np.flatnonzero(idx < 0)
            if missing.size:
                raise MeshError(f"facet {int(missing[0])} is not a face of any cell")


class _Topology:
    """Unique facets of a simplex mesh and the (one or two) cells sharing each."""

    def __init__(self, facet_nodes, facet_cells, cell_facets, local_index):
        self.facet_nodes = facet_nodes  # (nf, dim) sorted node ids
        self.facet_cells = facet_cells  # (nf, 2), second entry -1 on the boundary
        self.cell_facets = cell_facets  # (nc, dim + 1) facet id opposite each vertex
        self.local_index = local_index  # (nf, 2) local vertex index opposite the facet
        width = int(facet_nodes.max()) + 1 if facet_nodes.size else 1
        self._width = width
        self._keys = _encode(facet_nodes, width)
        self._order = np.argsort(self._keys, kind="stable")

    def lookup(self, sorted_nodes: NDArray[np.int64]) -> NDArray[np.int64]:
        """Facet ids for rows of sorted node ids, -1 where absent."""
        if sorted_nodes.size == 0:
            return np.zeros(0, dtype=np.int64)
        if sorted_nodes.max() >= self._width:
            out = np.full(sorted_nodes.shape[0], -1, dtype=np.int64)
            ok = np.all(sorted_nodes < self._width, axis=1)
            out[ok] = self.lookup(sorted_nodes[ok])
            return out
        keys = _encode(sorted_nodes, self._width)
        sorted_keys = self._keys[self._order]
        pos = np.searchsorted(sorted_keys, keys)
        pos = np.minimum(pos, len(sorted_keys) - 1)
        hit = sorted_keys[pos] == keys
        return np.where(hit, self._order[pos], -1)


def _encode(rows: NDArray[np.int64], width: int) -> NDArray[np.int64]:
    key = np.zeros(rows.shape[0], dtype=np.int64)
    for j in range(rows.shape[1]):
        key = key * width + rows[:, j]
    return key


def _build_topology(cells: NDArray[np.int64], dim: int) -> _Topology:
    nc, nv = cells.shape
    # facet opposite vertex i omits cells[:, i]
    local = np.array([[j for j in range(nv) if j != i] for i in range(nv)])
    all_facets = np.sort(cells[:, local].reshape(nc * nv, dim), axis=1)
    owner = np.repeat(np.arange(nc), nv)
    opposite = np.tile(np.arange(nv), nc)
    uniq, inverse, counts = np.unique(all_facets, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if counts.max(initial=0) > 2:
        raise MeshError("a facet is shared by more than two cells")
    nf = uniq.shape[0]
    facet_cells = np.full((nf, 2), -1, dtype=np.int64)
    local_index = np.full((nf, 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    inv_sorted = inverse[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = inv_sorted[1:] != inv_sorted[:-1]
    slot = np.where(first, 0, 1)
    facet_cells[inv_sorted, slot] = owner[order]
    local_index[inv_sorted, slot] = opposite[order]
    cell_facets = inverse.reshape(nc, nv)
    return _Topology(uniq.astype(np.int64), facet_cells, cell_facets, local_index)


def _signed_volumes(x: NDArray[np.float64], cells: NDArray[np.int64]) -> NDArray[np.float64]:
    dim = cells.shape[1] - 1
    edges = x[cells[:, 1:]] - x[cells[:, :1]]  # (nc, dim, dim): rows are edge vectors
    return np.linalg.det(edges) / math.factorial(dim)


class CellGeometry(NamedTuple):
    """Geometry of one simplex.

    ``jacobian`` maps reference to physical coordinates (columns are edge
    vectors from vertex 0); ``normals[i]`` is the outward unit normal of the
    facet opposite vertex ``i``.
    """

    volume: float
    jacobian: NDArray[np.float64]
    inverse: NDArray[np.float64]
    normals: NDArray[np.float64]


def cell_geometry(mesh: Mesh, cell: int) -> CellGeometry:
    """Volume, reference-map Jacobian, its inverse and outward facet normals."""
    if not 0 <= cell < mesh.n_cells:
        raise MeshError(f"cell id {cell} out of range")
    x = mesh.nodes[mesh.cells[cell]]
    jac = (x[1:] - x[0]).T
    cond = np.linalg.cond(jac)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise MeshError(f"cell {cell} is degenerate (condition number {cond:.3e})")
    volume = np.linalg.det(jac) / math.factorial(mesh.dim)
    inv = np.linalg.inv(jac)
    grads = np.vstack([-inv.sum(axis=0), inv])  # barycentric gradients
    # the facet opposite vertex i is where lambda_i = 0; outward is -grad lambda_i
    normals = -grads / np.linalg.norm(grads, axis=1, keepdims=True)
    return CellGeometry(float(abs(volume)), jac, inv, normals)


def facet_measure_and_normal(
    mesh: Mesh, facet_nodes: NDArray[np.int64], toward: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Areas (lengths in 2D) and unit normals of facets.

    Each normal is oriented away from the matching point in ``toward`` (for
    example the opposite vertex of the inside cell), so it points out of that
    cell.
    """
    x = mesh.nodes[facet_nodes]  # (nf, dim, dim)
    if mesh.dim == 2:
        t = x[:, 1] - x[:, 0]
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        area = np.linalg.norm(t, axis=1)
    else:
        n = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        area = 0.5 * np.linalg.norm(n, axis=1)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    side = np.einsum("fi,fi->f", n, toward - x[:, 0])
    n = np.where(side[:, None] > 0, -n, n)
    return area, n


@dataclass
class SubMeshMap:
    """A child mesh holding the cells of one region plus index maps.

    ``child_node_of_parent`` is -1 for parent nodes outside the region.
    ``interface`` flags child facets that border a parent cell outside the
    region; the rest lie on the parent's outer boundary.
    """

    parent: Mesh
    child: Mesh
    region: tuple[int, ...]
    parent_node_of_child: NDArray[np.int64]
    parent_cell_of_child: NDArray[np.int64]
    child_node_of_parent: NDArray[np.int64]
    interface: NDArray[np.bool_]


def extract_submesh(mesh: Mesh, region: int | Iterable[int]) -> SubMeshMap:
    """Extract the cells carrying ``region`` (one marker or several) as a child mesh.

    Child cells keep their parent region markers.  Child facets are all boundary facets of the child.  Each keeps the marker
    it has in the parent facet list, or :data:`UNMARKED` if it is not listed.
    """
    regions = (int(region),) if np.isscalar(region) else tuple(int(r) for r in region)
    cell_ids = np.flatnonzero(np.isin(mesh.cell_region, regions))
    if cell_ids.size == 0:
        raise MeshError(f"region {region} has no cells")
    parent_nodes = np.unique(mesh.cells[cell_ids])
    child_of_parent = np.full(mesh.n_nodes, -1, dtype=np.int64)
    child_of_parent[parent_nodes] = np.arange(parent_nodes.size)
    child_cells = child_of_parent[mesh.cells[cell_ids]]

    topo = mesh.topology()
    in_region = np.zeros(mesh.n_cells, dtype=bool)
    in_region[cell_ids] = True
    fc = topo.facet_cells
    a = in_region[fc[:, 0]]
    b = np.where(fc[:, 1] >= 0, in_region[np.maximum(fc[:, 1], 0)], False)
    on_child_boundary = a ^ b
    bfacets = topo.facet_nodes[on_child_boundary]
    interface = (fc[on_child_boundary, 1] >= 0)

    markers = np.full(bfacets.shape[0], UNMARKED, dtype=np.int64)
    if mesh.n_facets:
        listed = topo.lookup(np.sort(mesh.facets, axis=1))
        ids = np.flatnonzero(on_child_boundary)
        where = np.full(topo.facet_nodes.shape[0], -1, dtype=np.int64)
        where[ids] = np.arange(ids.size)
        ok = listed >= 0
        pos = where[listed[ok]]
        hit = pos >= 0
        markers[pos[hit]] = mesh.facet_marker[ok][hit]

    child = Mesh(
        mesh.dim,
        mesh.nodes[parent_nodes].copy(),
        child_cells,
        mesh.cell_region[cell_ids].copy(),
        child_of_parent[bfacets],
        markers,
    )
    return SubMeshMap(mesh, child, regions, parent_nodes, cell_ids, child_of_parent, interface)


class InterfaceFacet(NamedTuple):
    inside_cell: int
    outside_cell: int
    nodes: NDArray[np.int64]
    normal: NDArray[np.float64]


@dataclass
class InterfaceArrays:
    """Vectorized interface facet data in parent numbering."""

    inside_cell: NDArray[np.int64]
    outside_cell: NDArray[np.int64]
    nodes: NDArray[np.int64]
    normal: NDArray[np.float64]
    area: NDArray[np.float64]
    local_opposite: NDArray[np.int64]  # local vertex of inside_cell not on the facet


def interface_arrays(submap: SubMeshMap, nodes: NDArray[np.float64] | None = None) -> InterfaceArrays:
    mesh = submap.parent
    topo = mesh.topology()
    in_region = np.zeros(mesh.n_cells, dtype=bool)
    in_region[submap.parent_cell_of_child] = True
    fc = topo.facet_cells
    inner = fc[:, 1] >= 0
    a = in_region[fc[:, 0]]
    b = in_region[np.maximum(fc[:, 1], 0)] & inner
    sel = np.flatnonzero(inner & (a ^ b))
    first_inside = a[sel]
    inside = np.where(first_inside, fc[sel, 0], fc[sel, 1])
    outside = np.where(first_inside, fc[sel, 1], fc[sel, 0])
    opp = np.where(first_inside, topo.local_index[sel, 0], topo.local_index[sel, 1])
    fnodes = topo.facet_nodes[sel]
    x = mesh.nodes if nodes is None else nodes
    opposite_vertex = x[mesh.cells[inside, opp]]
    view = Mesh(mesh.dim, x, mesh.cells, mesh.cell_region) if nodes is not None else mesh
    area, normal = facet_measure_and_normal(view, fnodes, opposite_vertex)
    return InterfaceArrays(inside, outside, fnodes, normal, area, opp)


def interface_facets(submap: SubMeshMap) -> list[InterfaceFacet]:
    """Facets between the region and the rest of the mesh.

    Each entry holds the inside (material) cell, the outside cell, the facet
    node ids in parent numbering and the unit normal pointing out of the
    material.
    """
    arr = interface_arrays(submap)
    return [
        InterfaceFacet(int(i), int(o), n.copy(), v.copy())
        for i, o, n, v in zip(arr.inside_cell, arr.outside_cell, arr.nodes, arr.normal)
    ]


# --------------------------------------------------------------------------
# File I/O


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def parse_mesh(text: str, *, reorient: bool = True) -> Mesh:
    """Parse mesh text; see :func:`load_mesh`."""
    lines = _content_lines(text)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise MeshError("line 1: empty mesh file") from None
    if len(head) != 5 or head[0] != "emsimesh":
        raise MeshError(f"line {lineno}: expected 'emsimesh <dim> <n_nodes> <n_cells> <n_facets>'")
    try:
        dim, n_nodes, n_cells, n_facets = (int(v) for v in head[1:])
    except ValueError:
        raise MeshError(f"line {lineno}: header counts must be integers") from None
    if dim not in (2, 3) or min(n_nodes, n_cells, n_facets) < 0:
        raise MeshError(f"line {lineno}: invalid header values")

    def block(count, width, convert, what):
        rows = []
        for _ in range(count):
            try:
                ln, tok = next(lines)
            except StopIteration:
                raise MeshError(f"end of file: expected {count} {what} lines, got {len(rows)}") from None
            if len(tok) != width:
                raise MeshError(f"line {ln}: {what} line needs {width} values, got {len(tok)}")
            try:
                rows.append([convert(t) for t in tok])
            except ValueError:
                raise MeshError(f"line {ln}: cannot parse {what} values {tok}") from None
        return rows

    nodes = np.array(block(n_nodes, dim, float, "node"), dtype=np.float64).reshape(n_nodes, dim)
    cell_rows = np.array(block(n_cells, dim + 2, int, "cell"), dtype=np.int64).reshape(n_cells, dim + 2)
    facet_rows = np.array(block(n_facets, dim + 1, int, "facet"), dtype=np.int64).reshape(n_facets, dim + 1)
    extra = next(lines, None)
    if extra is not None:
        raise MeshError(f"line {extra[0]}: unexpected trailing data")
    if not np.all(np.isfinite(nodes)):
        raise MeshError("node coordinates must be finite")

    cells = cell_rows[:, : dim + 1].copy()
    for name, ids in (("cell", cells), ("facet", facet_rows[:, :dim])):
        bad = np.flatnonzero(np.any((ids < 0) | (ids >= n_nodes), axis=1))
        if bad.size:
            raise MeshError(f"{name} {int(bad[0])} references a missing node")

    vol = _signed_volumes(nodes, cells) if n_cells else np.zeros(0)
    scale = np.abs(vol).max(initial=0.0)
    degenerate = np.flatnonzero(np.abs(vol) <= 1e-14 * max(scale, 1e-300))
    if degenerate.size:
        raise MeshError(f"cell {int(degenerate[0])} is degenerate (zero volume)")
    flipped = np.flatnonzero(vol < 0)
    if flipped.size and not reorient:
        raise MeshError(f"cell {int(flipped[0])} is inverted (negative volume {vol[flipped[0]]:.3e})")
    cells[flipped, 0], cells[flipped, 1] = cells[flipped, 1], cells[flipped, 0].copy()

    mesh = Mesh(dim, nodes, cells, cell_rows[:, -1], facet_rows[:, :dim], facet_rows[:, -1], int(flipped.size))
    mesh.validate()
    return mesh


def load_mesh(path: str | Path, *, reorient: bool = True) -> Mesh:
    """Read a mesh file.

    Cells stored with negative orientation are flipped and counted in
    ``Mesh.reoriented``; with ``reorient=False`` the first inverted cell is
    reported as an error instead.  Parse errors carry the line number.
    """
    return parse_mesh(Path(path).read_text(), reorient=reorient)


def format_mesh(mesh: Mesh) -> str:
    out = [f"emsimesh {mesh.dim} {mesh.n_nodes} {mesh.n_cells} {mesh.n_facets}"]
    out += [" ".join(repr(float(v)) for v in row) for row in mesh.nodes]
    out += [" ".join(str(int(v)) for v in row) + f" {int(r)}" for row, r in zip(mesh.cells, mesh.cell_region)]
    out += [" ".join(str(int(v)) for v in row) + f" {int(m)}" for row, m in zip(mesh.facets, mesh.facet_marker)]
    return "\n".join(out) + "\n"


def save_mesh(mesh: Mesh, path: str | Path) -> None:
    Path(path).write_text(format_mesh(mesh))


# --------------------------------------------------------------------------
# Structured generators


def rectangle_mesh(
    xs: NDArray[np.float64], ys: NDArray[np.float64], region=None, diagonal: str = "right"
) -> Mesh:
    """Triangulated tensor grid over coordinates ``xs`` by ``ys``.

    ``region`` maps cell centroids ``(n, 2)`` to integer markers (default 0).
    Outer boundary edges are listed as facets with marker 1 (x min),
    2 (x max), 3 (y min), 4 (y max).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    nx, ny = xs.size, ys.size
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    nid = np.arange(nx * ny).reshape(nx, ny)
    a = nid[:-1, :-1].ravel()
    b = nid[1:, :-1].ravel()
    c = nid[1:, 1:].ravel()
    d = nid[:-1, 1:].ravel()
    if diagonal == "right":
        cells = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    else:
        cells = np.concatenate([np.column_stack([a, b, d]), np.column_stack([b, c, d])])
    # interleave the two triangles of each square for locality
    nsq = a.size
    order = np.column_stack([np.arange(nsq), np.arange(nsq) + nsq]).ravel()
    cells = cells[order]
    centroids = nodes[cells].mean(axis=1)
    regions = np.zeros(cells.shape[0], dtype=np.int64) if region is None else np.asarray(region(centroids), dtype=np.int64)
    facets, markers = [], []
    for marker, edge in ((1, nid[0, :]), (2, nid[-1, :]), (3, nid[:, 0]), (4, nid[:, -1])):
        facets.append(np.column_stack([edge[:-1], edge[1:]]))
        markers.append(np.full(edge.size - 1, marker))
    mesh = Mesh(2, nodes, cells, regions, np.concatenate(facets), np.concatenate(markers))
    return mesh


# Kuhn subdivision of the unit cube into six positively oriented tetrahedra.
_KUHN = np.array(
    [
        [0, 1, 3, 7],
        [0, 1, 5, 7],
        [0, 2, 3, 7],
        [0, 2, 6, 7],
        [0, 4, 5, 7],
        [0, 4, 6, 7],
    ]
)


def box_mesh(xs, ys, zs, region=None) -> Mesh:
    """Tetrahedralized tensor grid (six Kuhn tets per hexahedron).

    Outer boundary triangles carry markers 1..6 for x min, x max, y min,
    y max, z min, z max.
    """
    xs, ys, zs = (np.asarray(v, dtype=np.float64) for v in (xs, ys, zs))
    nx, ny, nz = xs.size, ys.size, zs.size
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    nid = np.arange(nx * ny * nz).reshape(nx, ny, nz)
    corners = []
    for bit in range(8):
        i, j, k = bit & 1, (bit >> 1) & 1, (bit >> 2) & 1
        corners.append(nid[i : nx - 1 + i, j : ny - 1 + j, k : nz - 1 + k].ravel())
    corners = np.stack(corners, axis=1)  # (nhex, 8)
    cells = corners[:, _KUHN].reshape(-1, 4)
    vol = _signed_volumes(nodes, cells)
    neg = vol < 0
    cells[neg, 0], cells[neg, 1] = cells[neg, 1], cells[neg, 0].copy()
    centroids = nodes[cells].mean(axis=1)
    regions = np.zeros(cells.shape[0], dtype=np.int64) if region is None else np.asarray(region(centroids), dtype=np.int64)
    mesh = Mesh(3, nodes, cells, regions)
    bf = mesh.boundary_facets()
    xb = nodes[bf]
    lo = np.array([xs[0], ys[0], zs[0]])
    hi = np.array([xs[-1], ys[-1], zs[-1]])
    markers = np.zeros(bf.shape[0], dtype=np.int64)
    for axis in range(3):
        markers[np.all(np.isclose(xb[:, :, axis], lo[axis]), axis=1)] = 2 * axis + 1
        markers[np.all(np.isclose(xb[:, :, axis], hi[axis]), axis=1)] = 2 * axis + 2
    mesh.facets = bf
    mesh.facet_marker = markers
    return mesh


def add_region_facets(mesh: Mesh, region: int, marker_of_centroid) -> Mesh:
    """List the boundary facets of ``region`` with markers from their centroids.

    ``marker_of_centroid`` maps facet centroids ``(n, dim)`` to markers; zero
    entries are skipped.  Returns a new mesh with the facets appended.
    """
    submap = extract_submesh(mesh, region)
    fac = submap.parent_node_of_child[submap.child.facets]
    centroids = mesh.nodes[fac].mean(axis=1)
    marks = np.asarray(marker_of_centroid(centroids), dtype=np.int64)
    keep = marks != 0
    out = mesh.copy()
    out.facets = np.concatenate([mesh.facets, fac[keep]])
    out.facet_marker = np.concatenate([mesh.facet_marker, marks[keep]])
    return out
