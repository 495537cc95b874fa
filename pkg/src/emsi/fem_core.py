"""P1 finite-element machinery shared by all solvers.

Element kernels are vectorized over cells.  A kernel receives a
:class:`CellData` block (geometry and quadrature for a batch of cells) and the
local nodal values of each unknown, shape ``(n_cells, n_local, n_components)``,
and returns the local residuals in the same layouts.  Element Jacobians are
built by forward differences of the kernel, one local degree of freedom at a
time for all cells at once.

All geometry is handled in three components: on 2D meshes gradients carry a
zero third entry, so vector unknowns with three components describe the
"2.5D" setting where nothing varies along the third axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .mesh import Mesh, MeshError, SubMeshMap

# Default Newton settings (energy-scaled residuals).
TOL_ABS = 1e-8
TOL_REL = 1e-10
MAX_ITER = 25
FD_STEP = 1e-7
TOL_STEP = 1e-12


class AssemblyError(RuntimeError):
    """A kernel produced a non-finite contribution."""


class SingularMatrixError(RuntimeError):
    """The linear system could not be factorized."""

    def __init__(self, message: str, dof: int):
        super().__init__(message)
        self.dof = dof


class NewtonError(RuntimeError):
    """Newton iteration did not converge."""

    def __init__(self, message: str, last_norm: float, history: list[float]):
        super().__init__(message)
        self.last_norm = last_norm
        self.history = history


# --------------------------------------------------------------------------
# Quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference simplex in barycentric coordinates.

    ``weights`` sum to the reference volume ``1/dim!``.
    """

    barycentric: NDArray[np.float64]
    weights: NDArray[np.float64]
    degree: int

    @property
    def dim(self) -> int:
        return self.barycentric.shape[1] - 1


def quadrature(dim: int, degree: int = 2) -> QuadratureRule:
    """Symmetric rules exact up to ``degree`` (1 or 2) on segments, triangles, tets."""
    if degree not in (1, 2):
        raise ValueError("only degree 1 and 2 rules are provided")
    vol = 1.0 / math.factorial(dim)
    if degree == 1 or dim == 0:
        bary = np.full((1, dim + 1), 1.0 / (dim + 1))
        return QuadratureRule(bary, np.array([vol]), degree)
    if dim == 1:
        g = 0.5 / math.sqrt(3.0)
        bary = np.array([[0.5 + g, 0.5 - g], [0.5 - g, 0.5 + g]])
    elif dim == 2:
        bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    elif dim == 3:
        a = (5.0 + 3.0 * math.sqrt(5.0)) / 20.0
        b = (5.0 - math.sqrt(5.0)) / 20.0
        bary = np.full((4, 4), b)
        np.fill_diagonal(bary, a)
    else:
        raise ValueError(f"unsupported dimension {dim}")
    n = bary.shape[0]
    return QuadratureRule(bary, np.full(n, vol / n), degree)


# --------------------------------------------------------------------------
# Fields


@dataclass
class Field:
    """Nodal P1 coefficients with two history slots.

    ``coeffs`` is node-major: entry ``node * n_components + component``.
    """

    mesh: Mesh | None
    n_components: int = 1
    coeffs: NDArray[np.float64] | None = None
    coeffs0: NDArray[np.float64] | None = None
    coeffs00: NDArray[np.float64] | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.coeffs is None:
            if self.mesh is None:
                raise ValueError("a field without a mesh needs explicit coefficients")
            self.coeffs = np.zeros(self.mesh.n_nodes * self.n_components)
        self.coeffs = np.array(self.coeffs, dtype=np.float64).ravel()
        if self.mesh is not None and self.coeffs.size != self.mesh.n_nodes * self.n_components:
            raise ValueError(
                f"field '{self.name}' needs {self.mesh.n_nodes * self.n_components} coefficients, got {self.coeffs.size}"
            )
        self.coeffs0 = self.coeffs.copy() if self.coeffs0 is None else np.array(self.coeffs0, dtype=np.float64).ravel()
        self.coeffs00 = self.coeffs0.copy() if self.coeffs00 is None else np.array(self.coeffs00, dtype=np.float64).ravel()
        if not (self.coeffs0.shape == self.coeffs00.shape == self.coeffs.shape):
            raise ValueError(f"history slots of field '{self.name}' differ in shape")

    @property
    def size(self) -> int:
        return self.coeffs.size

    @property
    def n_nodes(self) -> int:
        return self.coeffs.size // self.n_components

    def nodal(self, slot: str = "coeffs") -> NDArray[np.float64]:
        """Coefficients of a slot viewed as ``(n_nodes, n_components)``."""
        return getattr(self, slot).reshape(-1, self.n_components)

    def rotate_history(self) -> None:
        """K -> K0 -> K00; the current slot keeps its value as initial guess."""
        self.coeffs00 = self.coeffs0
        self.coeffs0 = self.coeffs.copy()

    def copy(self) -> Field:
        return Field(self.mesh, self.n_components, self.coeffs.copy(), self.coeffs0.copy(), self.coeffs00.copy(), self.name)


# --------------------------------------------------------------------------
# Geometry blocks


@dataclass
class CellData:
    """Geometry and quadrature for a batch of cells (padded to 3 components).

    ``grad[c, a, :]`` is the gradient of local shape function ``a``;
    ``shape[q, a]`` its value at quadrature point ``q``; ``weight[c, q]`` the
    physical quadrature weight; ``x[c, q, :]`` the point coordinates.
    """

    ids: NDArray[np.int64]
    volume: NDArray[np.float64]
    grad: NDArray[np.float64]
    shape: NDArray[np.float64]
    weight: NDArray[np.float64]
    x: NDArray[np.float64]

    @property
    def n_cells(self) -> int:
        return self.ids.size

    def at_qp(self, local: NDArray[np.float64]) -> NDArray[np.float64]:
        """Interpolate local nodal values ``(c, a, k)`` to ``(c, q, k)``."""
        return np.einsum("qa,cak->cqk", self.shape, local)

    def gradient(self, local: NDArray[np.float64]) -> NDArray[np.float64]:
        """Cellwise gradient ``(c, k, 3)`` of local nodal values ``(c, a, k)``."""
        return np.einsum("cak,cad->ckd", local, self.grad)

    def test(self, integrand: NDArray[np.float64]) -> NDArray[np.float64]:
        """Integrate ``integrand (c, q, k)`` against shape functions: ``(c, a, k)``."""
        return np.einsum("cq,qa,cqk->cak", self.weight, self.shape, integrand)

    def test_grad(self, flux: NDArray[np.float64]) -> NDArray[np.float64]:
        """Integrate ``flux (c, q, k, 3)`` against shape gradients: ``(c, a, k)``."""
        return np.einsum("cq,cqkd,cad->cak", self.weight, flux, self.grad)

    def integrate(self, integrand: NDArray[np.float64]) -> NDArray[np.float64]:
        """Cell integrals of ``integrand (c, q, ...)``."""
        return np.einsum("cq,cq...->c...", self.weight, integrand)


def pad3(v: NDArray[np.float64]) -> NDArray[np.float64]:
    """Pad the last axis with zeros up to three entries."""
    if v.shape[-1] == 3:
        return v
    pad = [(0, 0)] * (v.ndim - 1) + [(0, 3 - v.shape[-1])]
    return np.pad(v, pad)


def shape_gradients(nodes: NDArray[np.float64], cells: NDArray[np.int64]) -> tuple[NDArray, NDArray]:
    """Signed volumes and P1 shape gradients ``(nc, dim+1, dim)``."""
    dim = cells.shape[1] - 1
    x = nodes[cells]
    jac = np.swapaxes(x[:, 1:] - x[:, :1], 1, 2)  # columns are edges
    det = np.linalg.det(jac)
    if np.any(det == 0.0):
        bad = int(np.flatnonzero(det == 0.0)[0])
        raise MeshError(f"cell {bad} is degenerate")
    inv = np.linalg.inv(jac)  # rows are gradients of lambda_1..lambda_d
    grads = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)
    return det / math.factorial(dim), grads


def cell_data(
    mesh: Mesh,
    cells: NDArray[np.int64] | None = None,
    nodes: NDArray[np.float64] | None = None,
    rule: QuadratureRule | None = None,
) -> CellData:
    """Build :class:`CellData` for ``cells`` (default all) at coordinates ``nodes``."""
    ids = np.arange(mesh.n_cells) if cells is None else np.asarray(cells, dtype=np.int64)
    x = mesh.nodes if nodes is None else nodes
    rule = rule or quadrature(mesh.dim, 2)
    conn = mesh.cells[ids]
    vol, grads = shape_gradients(x, conn)
    if np.any(vol <= 0.0):
        bad = int(ids[np.flatnonzero(vol <= 0.0)[0]])
        raise MeshError(f"cell {bad} is inverted")
    shape = rule.barycentric
    weight = vol[:, None] * (rule.weights / rule.weights.sum())[None, :]
    xq = np.einsum("qa,cad->cqd", shape, x[conn])
    return CellData(ids, vol, pad3(grads), shape, weight, pad3(xq))


@dataclass
class FacetData:
    """Facets attached to one adjacent cell each (the cell they are integrated from).

    ``shape[f, q, a]`` are the cell's local shape functions at the facet
    quadrature points; ``normal`` points out of the attached cell.
    """

    cell: NDArray[np.int64]
    nodes: NDArray[np.int64]
    area: NDArray[np.float64]
    normal: NDArray[np.float64]
    shape: NDArray[np.float64]
    weight: NDArray[np.float64]
    x: NDArray[np.float64]
    grad: NDArray[np.float64]
    marker: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_facets(self) -> int:
        return self.cell.size

    def at_qp(self, local: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.einsum("fqa,fak->fqk", self.shape, local)

    def gradient(self, local: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.einsum("fak,fad->fkd", local, self.grad)

    def test(self, integrand: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.einsum("fq,fqa,fqk->fak", self.weight, self.shape, integrand)


def facet_data(
    mesh: Mesh,
    cells: NDArray[np.int64],
    opposite: NDArray[np.int64],
    nodes: NDArray[np.float64] | None = None,
    marker: NDArray[np.int64] | None = None,
) -> FacetData:
    """Facet quadrature for the facet of ``cells[f]`` opposite local vertex ``opposite[f]``."""
    from .mesh import facet_measure_and_normal

    x = mesh.nodes if nodes is None else nodes
    cells = np.asarray(cells, dtype=np.int64)
    opposite = np.asarray(opposite, dtype=np.int64)
    nf = cells.size
    nv = mesh.dim + 1
    conn = mesh.cells[cells]
    if nf == 0:
        z = np.zeros
        return FacetData(cells, z((0, mesh.dim), dtype=np.int64), z(0), z((0, 3)), z((0, 0, nv)), z((0, 0)), z((0, 0, 3)), z((0, nv, 3)), z(0, dtype=np.int64))
    local = np.array([[j for j in range(nv) if j != i] for i in range(nv)])[opposite]  # (nf, dim)
    fnodes = np.take_along_axis(conn, local, axis=1)
    view = mesh if nodes is None else Mesh(mesh.dim, x, mesh.cells, mesh.cell_region)
    area, normal = facet_measure_and_normal(view, fnodes, x[conn[np.arange(nf), opposite]])
    rule = quadrature(mesh.dim - 1, 2)
    nq = rule.weights.size
    shape = np.zeros((nf, nq, nv))
    rows = np.arange(nf)[:, None]
    for q in range(nq):
        shape[rows, q, local] = rule.barycentric[q][None, :]
    weight = area[:, None] * (rule.weights / rule.weights.sum())[None, :]
    xq = np.einsum("qa,fad->fqd", rule.barycentric, x[fnodes])
    _, grads = shape_gradients(x, conn)
    mk = np.zeros(nf, dtype=np.int64) if marker is None else np.asarray(marker, dtype=np.int64)
    return FacetData(cells, fnodes, area, pad3(normal), shape, weight, pad3(xq), pad3(grads), mk)


def boundary_facet_data(
    mesh: Mesh, facets: NDArray[np.int64], nodes: NDArray[np.float64] | None = None, marker=None
) -> FacetData:
    """:class:`FacetData` for outer-boundary facets given by node ids."""
    topo = mesh.topology()
    fid = topo.lookup(np.sort(np.asarray(facets, dtype=np.int64).reshape(-1, mesh.dim), axis=1))
    if np.any(fid < 0):
        raise MeshError("facet is not a face of the mesh")
    return facet_data(mesh, topo.facet_cells[fid, 0], topo.local_index[fid, 0], nodes, marker)


# --------------------------------------------------------------------------
# Assembly


Kernel = Callable[[CellData, list], list]
FacetKernel = Callable[[FacetData, list], list]


@dataclass
class SparseSystem:
    """Residual and CSR Jacobian of one Newton step, constraints applied."""

    residual: NDArray[np.float64]
    jacobian: sp.csr_matrix
    constrained: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    prescribed: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        n = self.residual.size
        if self.jacobian.shape != (n, n):
            raise ValueError(f"jacobian shape {self.jacobian.shape} does not match residual length {n}")


@dataclass
class Dirichlet:
    """Prescribed values for one component of one unknown at a set of nodes."""

    field: int
    nodes: NDArray[np.int64]
    component: int
    values: NDArray[np.float64] | float

    def dofs(self, offsets: Sequence[int], ncomps: Sequence[int]) -> tuple[NDArray, NDArray]:
        nodes = np.asarray(self.nodes, dtype=np.int64)
        dofs = offsets[self.field] + nodes * ncomps[self.field] + self.component
        vals = np.broadcast_to(np.asarray(self.values, dtype=np.float64), nodes.shape)
        return dofs, np.array(vals)


def _dof_layout(fields: Sequence[Field]) -> tuple[list[int], list[int], int]:
    offsets, ncomps, n = [], [], 0
    for f in fields:
        offsets.append(n)
        ncomps.append(f.n_components)
        n += f.size
    return offsets, ncomps, n


def _local_dofs(conn: NDArray[np.int64], offsets, ncomps) -> NDArray[np.int64]:
    parts = []
    for off, nc in zip(offsets, ncomps):
        parts.append((off + conn[:, :, None] * nc + np.arange(nc)[None, None, :]).reshape(conn.shape[0], -1))
    return np.concatenate(parts, axis=1)


def _split(flat: NDArray[np.float64], nloc: int, ncomps) -> list[NDArray[np.float64]]:
    out, start = [], 0
    for nc in ncomps:
        out.append(flat[:, start : start + nloc * nc].reshape(-1, nloc, nc))
        start += nloc * nc
    return out


def _join(parts: list[NDArray[np.float64]]) -> NDArray[np.float64]:
    return np.concatenate([p.reshape(p.shape[0], -1) for p in parts], axis=1)


def _check_finite(block: NDArray[np.float64], ids: NDArray[np.int64], what: str) -> None:
    bad = ~np.all(np.isfinite(block.reshape(block.shape[0], -1)), axis=1)
    if np.any(bad):
        raise AssemblyError(f"non-finite {what} contribution in cell {int(ids[np.flatnonzero(bad)[0]])}")


def _local_system(fn, data, local_vals, ncomps, affine, need_jac, ids, what):
    nloc = local_vals[0].shape[1]
    x0 = _join(local_vals)
    r0 = _join(fn(data, _split(x0, nloc, ncomps)))
    _check_finite(r0, ids, what)
    if not need_jac:
        return r0, None
    nd = x0.shape[1]
    jac = np.empty((x0.shape[0], nd, nd))
    for j in range(nd):
        h = (1.0 + np.abs(x0[:, j])) * (1.0 if affine else FD_STEP)
        xp = x0.copy()
        xp[:, j] += h
        h = xp[:, j] - x0[:, j]  # exactly representable step
        rp = _join(fn(data, _split(xp, nloc, ncomps)))
        if affine:
            jac[:, :, j] = (rp - r0) / h[:, None]
            continue
        # central differences: the step is large relative to the unknowns in SI units
        xm = x0.copy()
        xm[:, j] -= h
        rm = _join(fn(data, _split(xm, nloc, ncomps)))
        jac[:, :, j] = (rp - rm) / (2.0 * h[:, None])
    _check_finite(jac, ids, what + " jacobian")
    return r0, jac


def assemble(
    kernel: Kernel | None,
    fields: Sequence[Field],
    mesh: Mesh,
    facet_kernels: Sequence[tuple[FacetData, FacetKernel]] = (),
    dirichlet: Sequence[Dirichlet] = (),
    *,
    cells: CellData | None = None,
    affine: bool = False,
    jacobian: bool = True,
    cell_order: NDArray[np.int64] | None = None,
) -> SparseSystem:
    """Assemble residual and Jacobian for the unknowns ``fields``.

    Degrees of freedom are numbered field by field, node-major inside each
    field.  ``affine=True`` tells the assembler the kernels are affine in the
    unknowns, so unit-size difference steps give exact Jacobians.
    ``cell_order`` permutes the scatter order (for reproducibility checks).
    Dirichlet rows become identity rows with residual ``value - prescribed``.
    """
    offsets, ncomps, n = _dof_layout(fields)
    coeffs = np.concatenate([f.coeffs for f in fields])
    rows_r, vals_r, rows_j, cols_j, vals_j = [], [], [], [], []

    if kernel is not None:
        data = cells if cells is not None else cell_data(mesh)
        if cell_order is not None:
            data = CellData(data.ids[cell_order], data.volume[cell_order], data.grad[cell_order], data.shape, data.weight[cell_order], data.x[cell_order])
        conn = mesh.cells[data.ids]
        ldofs = _local_dofs(conn, offsets, ncomps)
        local = _split(coeffs[ldofs], conn.shape[1], ncomps)
        r, jac = _local_system(kernel, data, local, ncomps, affine, jacobian, data.ids, "cell")
        rows_r.append(ldofs.ravel())
        vals_r.append(r.ravel())
        if jacobian:
            nd = ldofs.shape[1]
            rows_j.append(np.repeat(ldofs, nd, axis=1).ravel())
            cols_j.append(np.tile(ldofs, (1, nd)).ravel())
            vals_j.append(jac.ravel())

    for fdata, fkernel in facet_kernels:
        if fdata.n_facets == 0:
            continue
        conn = mesh.cells[fdata.cell]
        ldofs = _local_dofs(conn, offsets, ncomps)
        local = _split(coeffs[ldofs], conn.shape[1], ncomps)
        r, jac = _local_system(fkernel, fdata, local, ncomps, affine, jacobian, fdata.cell, "facet")
        rows_r.append(ldofs.ravel())
        vals_r.append(r.ravel())
        if jacobian:
            nd = ldofs.shape[1]
            rows_j.append(np.repeat(ldofs, nd, axis=1).ravel())
            cols_j.append(np.tile(ldofs, (1, nd)).ravel())
            vals_j.append(jac.ravel())

    if rows_r:
        residual = np.bincount(np.concatenate(rows_r), weights=np.concatenate(vals_r), minlength=n)
    else:
        residual = np.zeros(n)
    if jacobian and rows_j:
        J = sp.coo_matrix(
            (np.concatenate(vals_j), (np.concatenate(rows_j), np.concatenate(cols_j))), shape=(n, n)
        ).tocsr()
    else:
        J = sp.csr_matrix((n, n))
    J.sum_duplicates()

    cdofs, cvals = _collect_dirichlet(dirichlet, offsets, ncomps)
    system = SparseSystem(residual, J, cdofs, cvals)
    apply_dirichlet(system, coeffs)
    return system


def _collect_dirichlet(dirichlet, offsets, ncomps):
    if not dirichlet:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    d, v = zip(*(bc.dofs(offsets, ncomps) for bc in dirichlet))
    dofs = np.concatenate(d)
    vals = np.concatenate(v)
    # later constraints win on overlap
    _, last = np.unique(dofs[::-1], return_index=True)
    keep = dofs.size - 1 - last
    keep.sort()
    return dofs[keep], vals[keep]


def apply_dirichlet(system: SparseSystem, coeffs: NDArray[np.float64]) -> None:
    """Replace constrained rows by identity rows, residual = value - prescribed."""
    if system.constrained.size == 0:
        return
    n = system.residual.size
    mask = np.ones(n)
    mask[system.constrained] = 0.0
    eye = np.zeros(n)
    eye[system.constrained] = 1.0
    system.jacobian = (sp.diags(mask) @ system.jacobian + sp.diags(eye)).tocsr()
    system.jacobian.eliminate_zeros()
    system.residual[system.constrained] = coeffs[system.constrained] - system.prescribed


def solve_linear(system: SparseSystem) -> NDArray[np.float64]:
    """Newton update ``delta`` with ``J delta = -r`` by sparse LU."""
    J = system.jacobian.tocsc()
    r = system.residual
    n = r.size
    if n == 0:
        return np.zeros(0)
    empty = np.flatnonzero(np.diff(J.indptr) == 0)
    if empty.size:
        raise SingularMatrixError(f"matrix is singular: zero column at dof {int(empty[0])}", int(empty[0]))
    # row then column equilibration: u, T, phi and A blocks differ by many decades
    rmax = np.asarray(abs(J).max(axis=1).todense()).ravel()
    if np.any(rmax == 0.0):
        dof = int(np.flatnonzero(rmax == 0.0)[0])
        raise SingularMatrixError(f"matrix is singular: zero row at dof {dof}", dof)
    rs = 1.0 / rmax
    Jr = sp.diags(rs) @ J
    cs = 1.0 / np.asarray(abs(Jr).max(axis=0).todense()).ravel()
    Js = (Jr @ sp.diags(cs)).tocsc()
    try:
        lu = spla.splu(Js)
    except RuntimeError as exc:
        dof = _zero_pivot_dof(Js)
        raise SingularMatrixError(f"matrix is singular at dof {dof}: {exc}", dof) from None
    tiny = np.flatnonzero(np.abs(lu.U.diagonal()) <= 1e-14)
    if tiny.size:
        dof = int(lu.perm_c[tiny[0]])
        raise SingularMatrixError(f"matrix is singular: zero pivot at dof {dof}", dof)
    delta = cs * lu.solve(-rs * r)
    if not np.all(np.isfinite(delta)):
        dof = int(np.flatnonzero(~np.isfinite(delta))[0])
        raise SingularMatrixError(f"matrix is singular: non-finite update at dof {dof}", dof)
    return delta


def _zero_pivot_dof(J: sp.csc_matrix) -> int:
    dense_ok = J.shape[0] <= 2000
    if dense_ok:
        q, r = np.linalg.qr(J.toarray())
        d = np.abs(np.diag(r))
        return int(np.argmin(d))
    return -1


# --------------------------------------------------------------------------
# Newton


@dataclass
class NewtonReport:
    iterations: int
    residual_norms: list[float]
    converged: bool


def _scatter(fields: Sequence[Field], x: NDArray[np.float64]) -> None:
    start = 0
    for f in fields:
        f.coeffs = x[start : start + f.size].copy()
        start += f.size


def newton_solve(
    residual_fn: Callable[[Sequence[Field]], SparseSystem],
    fields: Sequence[Field],
    tol_abs: float = TOL_ABS,
    tol_rel: float = TOL_REL,
    max_iter: int = MAX_ITER,
    damping: bool = True,
    tol_step: float = TOL_STEP,
    linear: bool = False,
) -> NewtonReport:
    """Damped Newton iteration on the coefficients of ``fields`` (in place).

    Converged when ``|r| <= tol_abs`` or ``|r| <= tol_rel * |r_0|``, or when
    a full undamped step changes the unknowns by at most ``tol_step`` relative
    to their size (the residual is then at round-off level).  Constrained dofs
    are set to their prescribed values before the first residual counts and
    pinned after every update.  With ``damping`` the step is halved (up to 10
    times) while the residual norm grows.  For ``linear`` (affine) problems
    damping is off and the iteration also stops once a step fails to halve the
    residual, which then sits at round-off level.
    """
    if linear:
        damping = False
    system = residual_fn(fields)
    if system.constrained.size:
        x = np.concatenate([f.coeffs for f in fields])
        if np.any(x[system.constrained] != system.prescribed):
            x[system.constrained] = system.prescribed
            _scatter(fields, x)
            system = residual_fn(fields)
    norm = float(np.linalg.norm(system.residual))
    history = [norm]
    r0 = norm
    if not np.isfinite(norm):
        raise NewtonError("initial residual is not finite", norm, history)
    it = 0
    while not (norm <= tol_abs or norm <= tol_rel * r0):
        if it >= max_iter:
            raise NewtonError(f"Newton did not converge in {max_iter} iterations (|r|={norm:.3e})", norm, history)
        delta = solve_linear(system)
        x = np.concatenate([f.coeffs for f in fields])
        if np.linalg.norm(delta) <= tol_step * max(np.linalg.norm(x), 1e-300):
            x += delta
            x[system.constrained] = system.prescribed
            _scatter(fields, x)
            system = residual_fn(fields)
            norm = float(np.linalg.norm(system.residual))
            history.append(norm)
            it += 1
            break
        step = 1.0
        for _ in range(11):
            trial = x + step * delta
            trial[system.constrained] = system.prescribed
            _scatter(fields, trial)
            try:
                new_system = residual_fn(fields)
                new_norm = float(np.linalg.norm(new_system.residual))
            except (AssemblyError, MeshError, FloatingPointError, ValueError):
                new_system, new_norm = None, math.inf
            if not damping or (np.isfinite(new_norm) and new_norm <= norm):
                break
            step *= 0.5
        if new_system is None or not np.isfinite(new_norm):
            _scatter(fields, x)
            raise NewtonError("Newton step produced an invalid state", norm, history)
        stalled = linear and it >= 1 and new_norm > 0.5 * norm
        system, norm = new_system, new_norm
        history.append(norm)
        it += 1
        if stalled:
            break
    return NewtonReport(it, history, True)


# --------------------------------------------------------------------------
# Transfers and projections


def transfer_nodal(src: Field, dst: Field, submap: SubMeshMap, direction: str = "pull", slots=("coeffs",)) -> None:
    """Copy nodal coefficients between a mesh and its submesh.

    ``pull`` copies parent values onto the child, ``push`` copies child values
    onto the mapped parent nodes (other parent entries are untouched).
    """
    if src.n_components != dst.n_components:
        raise ValueError(f"component mismatch: {src.n_components} vs {dst.n_components}")
    idx = submap.parent_node_of_child
    for slot in slots:
        s = src.nodal(slot)
        d = dst.nodal(slot).copy()
        if direction == "pull":
            if s.shape[0] != submap.parent.n_nodes or d.shape[0] != submap.child.n_nodes:
                raise ValueError("pull expects a parent source and a child destination")
            d[:] = s[idx]
        elif direction == "push":
            if s.shape[0] != submap.child.n_nodes or d.shape[0] != submap.parent.n_nodes:
                raise ValueError("push expects a child source and a parent destination")
            d[idx] = s
        else:
            raise ValueError(f"direction must be 'pull' or 'push', got {direction!r}")
        setattr(dst, slot, d.ravel())


def lumped_average(mesh: Mesh, cellwise: NDArray[np.float64], nodes: NDArray[np.float64] | None = None,
                   volume: NDArray[np.float64] | None = None) -> NDArray[np.float64]:
    """Volume-weighted nodal average of per-cell values ``(n_cells, ...)``."""
    if volume is None:
        volume, _ = shape_gradients(mesh.nodes if nodes is None else nodes, mesh.cells)
    flat = cellwise.reshape(mesh.n_cells, -1)
    nv = mesh.cells.shape[1]
    idx = mesh.cells.ravel()
    w = np.repeat(volume, nv)
    denom = np.bincount(idx, weights=w, minlength=mesh.n_nodes)
    out = np.empty((mesh.n_nodes, flat.shape[1]))
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(idx, weights=w * np.repeat(flat[:, k], nv), minlength=mesh.n_nodes)
    out /= np.where(denom > 0, denom, 1.0)[:, None]
    return out.reshape((mesh.n_nodes,) + cellwise.shape[1:])


def cell_gradients(field: Field, nodes: NDArray[np.float64] | None = None) -> NDArray[np.float64]:
    """Per-cell gradients ``(n_cells, n_components, dim)`` of a P1 field."""
    mesh = field.mesh
    _, grads = shape_gradients(mesh.nodes if nodes is None else nodes, mesh.cells)
    vals = field.nodal()[mesh.cells]  # (nc, nv, k)
    return np.einsum("cak,cad->ckd", vals, grads)


def project_gradient(field: Field, nodes: NDArray[np.float64] | None = None) -> Field:
    """Lumped L2 projection of the cellwise gradient onto P1.

    The result has ``n_components * dim`` components ordered component-major
    (``d field_k / d x_j`` at index ``k * dim + j``).
    """
    mesh = field.mesh
    x = mesh.nodes if nodes is None else nodes
    vol, grads = shape_gradients(x, mesh.cells)
    g = np.einsum("cak,cad->ckd", field.nodal()[mesh.cells], grads)
    nodal = lumped_average(mesh, g.reshape(mesh.n_cells, -1), volume=np.abs(vol))
    return Field(mesh, field.n_components * mesh.dim, nodal.ravel(), name=f"grad_{field.name}")
