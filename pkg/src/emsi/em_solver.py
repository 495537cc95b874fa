"""Electromagnetic potentials on the whole-domain (Eulerian) mesh.

The scalar potential ``phi`` comes from the charge balance and the vector
potential ``A`` from the Lorenz-gauged wave equation, both discretized with
backward Euler and multiplied through by the time step.  Material response
(polarization, magnetization, free current) is evaluated at quadrature points
of the body cells from the current iterate, using the thermomechanical data
the body hands over in :class:`BodyState`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from . import EPS0, MU0
from .constitutive import (
    LEVI_CIVITA,
    LinearMaterial,
    MagnetoHyperelasticMaterial,
    StateSample,
    eval_fluxes,
    eval_linear,
    eval_magnetohyperelastic,
)
from .fem_core import (
    CellData,
    Dirichlet,
    FacetData,
    Field,
    NewtonReport,
    assemble,
    cell_data,
    facet_data,
    lumped_average,
    newton_solve,
    pad3,
    shape_gradients,
)
from .mesh import Mesh, SubMeshMap, interface_arrays

# Electromagnetic residuals are tiny in SI units; convergence is judged relative
# and one refinement step is taken so global balances hold to round-off.
EM_TOL_ABS = 0.0
EM_TOL_REL = 1e-14

BoundaryFn = Callable[[NDArray[np.float64], float], NDArray[np.float64]]


@dataclass
class PotentialBC:
    """Prescribed scalar potential ``fn(x, t)`` on a node set of the full mesh."""

    nodes: NDArray[np.int64]
    fn: BoundaryFn


@dataclass
class BodyState:
    """Thermomechanical data of the body in full-mesh numbering.

    Cellwise arrays follow ``submap.parent_cell_of_child``.  ``T`` and ``v``
    are nodal on the full mesh (values off the body are unused).
    """

    submap: SubMeshMap
    materials: dict
    gradu: NDArray[np.float64]
    gradT: NDArray[np.float64]
    T: NDArray[np.float64]
    v: NDArray[np.float64]

    @classmethod
    def at_rest(cls, submap: SubMeshMap, materials: dict, T_ref: float | None = None) -> BodyState:
        nb = submap.parent_cell_of_child.size
        n = submap.parent.n_nodes
        if T_ref is None:
            T_ref = next((m.T_ref for m in materials.values() if isinstance(m, LinearMaterial)), 300.0)
        return cls(submap, materials, np.zeros((nb, 3, 3)), np.zeros((nb, 3)), np.full(n, float(T_ref)), np.zeros((n, 3)))

    @property
    def cells(self) -> NDArray[np.int64]:
        return self.submap.parent_cell_of_child

    def groups(self):
        """(material, positions in the body cell list) per region present."""
        regions = self.submap.parent.cell_region[self.cells]
        for region in np.unique(regions):
            mat = self.materials.get(int(region))
            if mat is None:
                raise KeyError(f"no material for region {int(region)}")
            yield mat, np.flatnonzero(regions == region)


@dataclass
class EMState:
    """Potentials with histories and cached material sources on the full mesh.

    ``P_qp`` and ``P0_qp`` hold polarization at the quadrature points of the
    body cells for the current and previous step.  Nodal ``P``, ``M``,
    ``Jfr`` and ``q_free`` are lumped averages over body cells (zero on nodes
    that touch no body cell); ``M`` and ``q_free`` feed the curl and convection
    terms of the charge balance.
    """

    mesh: Mesh
    phi: Field
    A: Field
    dt: float
    t: float = 0.0
    body: BodyState | None = None
    phi_bcs: list[PotentialBC] = field(default_factory=list)
    A_boundary: BoundaryFn | None = None
    P_qp: NDArray[np.float64] | None = None
    P0_qp: NDArray[np.float64] | None = None
    P: NDArray[np.float64] | None = None
    P0: NDArray[np.float64] | None = None
    M: NDArray[np.float64] | None = None
    Jfr: NDArray[np.float64] | None = None
    q_free: NDArray[np.float64] | None = None
    tol_abs: float = EM_TOL_ABS
    tol_rel: float = EM_TOL_REL
    max_iter: int = 25
    max_sweeps: int = 1
    sweep_tol: float = 1e-12

    def __post_init__(self) -> None:
        n = self.mesh.n_nodes
        nb = 0 if self.body is None else self.body.cells.size
        nq = self.mesh.dim + 1
        z = lambda *s: np.zeros(s)
        if self.P_qp is None or self.P_qp.shape[0] != nb:
            self.P_qp = z(nb, nq, 3)
        if self.P0_qp is None or self.P0_qp.shape != self.P_qp.shape:
            self.P0_qp = self.P_qp.copy()
        for name in ("P", "P0", "M", "Jfr"):
            if getattr(self, name) is None:
                setattr(self, name, z(n, 3))
        if self.q_free is None:
            self.q_free = z(n)

    @classmethod
    def zeros(cls, mesh: Mesh, dt: float, **kw) -> EMState:
        return cls(mesh, Field(mesh, 1, name="phi"), Field(mesh, 3, name="A"), dt, **kw)

    @property
    def v(self) -> NDArray[np.float64]:
        if self.body is None:
            return np.zeros((self.mesh.n_nodes, 3))
        return self.body.v

    def rotate_history(self) -> None:
        self.phi.rotate_history()
        self.A.rotate_history()
        self.P0_qp = self.P_qp.copy()
        self.P0 = self.P.copy()


# --------------------------------------------------------------------------
# Field recovery


def _interp(nodal: NDArray[np.float64], conn: NDArray[np.int64], shape: NDArray[np.float64]) -> NDArray[np.float64]:
    """Values at quadrature points from nodal data ``(n, k)``."""
    loc = nodal[conn]
    if shape.ndim == 2:
        return np.einsum("qa,cak->cqk", shape, loc)
    return np.einsum("cqa,cak->cqk", shape, loc)


def curl_from_gradient(grad: NDArray[np.float64]) -> NDArray[np.float64]:
    """``curl_i = eps_ijk d A_k / d x_j`` from ``grad[..., k, j]``."""
    return np.einsum("ijk,...kj->...i", LEVI_CIVITA, grad)


def recover_EB(phi: Field, A: Field, A0: NDArray[np.float64] | Field, dt: float,
               nodes: NDArray[np.float64] | None = None) -> tuple[Field, Field]:
    """Nodal ``E = -grad phi - (A - A0)/dt`` and ``B = curl A`` by gradient projection."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    mesh = phi.mesh
    x = mesh.nodes if nodes is None else nodes
    vol, grads = shape_gradients(x, mesh.cells)
    gphi = pad3(np.einsum("ca,cad->cd", phi.nodal()[mesh.cells][:, :, 0], grads))
    gA = pad3(np.einsum("cak,cad->ckd", A.nodal()[mesh.cells], grads))
    a0 = A0.nodal() if isinstance(A0, Field) else np.asarray(A0).reshape(-1, 3)
    vol = np.abs(vol)
    E = -lumped_average(mesh, gphi, volume=vol) - (A.nodal() - a0) / dt
    B = lumped_average(mesh, curl_from_gradient(gA), volume=vol)
    return Field(mesh, 3, E.ravel(), name="E"), Field(mesh, 3, B.ravel(), name="B")


def cell_fields(state: EMState, slot: str = "coeffs", nodes=None):
    """Cellwise ``grad phi (c, 3)`` and ``B (c, 3)`` for a history slot."""
    mesh = state.mesh
    x = mesh.nodes if nodes is None else nodes
    _, grads = shape_gradients(x, mesh.cells)
    grads = pad3(grads)
    phi = getattr(state.phi, slot).reshape(-1, 1)
    A = getattr(state.A, slot).reshape(-1, 3)
    gphi = np.einsum("ca,cad->cd", phi[mesh.cells][:, :, 0], grads)
    gA = np.einsum("cak,cad->ckd", A[mesh.cells], grads)
    return gphi, curl_from_gradient(gA)


# --------------------------------------------------------------------------
# Material response at quadrature points


def material_response(mat, T, gradu, E, B, gradT, v):
    """``(P, M, Jfr)`` at points with batch shape ``T.shape``."""
    if isinstance(mat, MagnetoHyperelasticMaterial):
        F = gradu + np.eye(3)
        _, _, M = eval_magnetohyperelastic(mat, F, B)
        z = np.zeros_like(E)
        return z, M, z
    s = StateSample.build(T, gradu, E, B, gradT, v)
    _, _, P, M = eval_linear(mat, s)
    _, Jfr = eval_fluxes(mat, s.gradT, s.Escr, s.Jdet, s.T)
    return P, M, Jfr


class _BodyPoints:
    """Quadrature-point inputs of body cells for one integration layout."""

    def __init__(self, state: EMState, body_pos: NDArray[np.int64], conn: NDArray[np.int64], shape: NDArray[np.float64]):
        body = state.body
        nq = shape.shape[-2]
        self.pos = body_pos
        self.T = _interp(body.T[:, None], conn, shape)[..., 0]
        self.v = _interp(body.v, conn, shape)
        self.gradu = np.broadcast_to(body.gradu[body_pos][:, None], (body_pos.size, nq, 3, 3))
        self.gradT = np.broadcast_to(body.gradT[body_pos][:, None], (body_pos.size, nq, 3))
        regions = body.submap.parent.cell_region[body.cells[body_pos]]
        self.groups = []
        for region in np.unique(regions):
            self.groups.append((body.materials[int(region)], np.flatnonzero(regions == region)))

    def response(self, E, B):
        P = np.zeros_like(E)
        M = np.zeros_like(E)
        Jfr = np.zeros_like(E)
        for mat, idx in self.groups:
            p, m, j = material_response(mat, self.T[idx], self.gradu[idx], E[idx], B[idx], self.gradT[idx], self.v[idx])
            P[idx], M[idx], Jfr[idx] = p, m, j
        return P, M, Jfr


def _body_lookup(state: EMState) -> NDArray[np.int64]:
    pos = np.full(state.mesh.n_cells, -1, dtype=np.int64)
    if state.body is not None:
        pos[state.body.cells] = np.arange(state.body.cells.size)
    return pos


def _nodal_curl_M(state: EMState, nodes) -> NDArray[np.float64]:
    """Cellwise curl of the nodal magnetization (zero off the body)."""
    mesh = state.mesh
    _, grads = shape_gradients(nodes, mesh.cells)
    gM = np.einsum("cak,cad->ckd", state.M[mesh.cells], pad3(grads))
    curl = curl_from_gradient(gM)
    mask = _body_lookup(state) >= 0
    return np.where(mask[:, None], curl, 0.0)


# --------------------------------------------------------------------------
# Boundary conditions


def phi_dirichlet(state: EMState) -> list[Dirichlet]:
    """Homogeneous potential on the outer boundary plus scenario electrodes."""
    mesh = state.mesh
    bcs = [Dirichlet(0, mesh.boundary_nodes(), 0, 0.0)]
    for bc in state.phi_bcs:
        vals = np.asarray(bc.fn(mesh.nodes[bc.nodes], state.t), dtype=np.float64)
        bcs.append(Dirichlet(0, bc.nodes, 0, np.broadcast_to(vals, bc.nodes.shape)))
    return bcs


def A_dirichlet(state: EMState) -> list[Dirichlet]:
    mesh = state.mesh
    bn = mesh.boundary_nodes()
    if state.A_boundary is None:
        vals = np.zeros((bn.size, 3))
    else:
        vals = np.asarray(state.A_boundary(mesh.nodes[bn], state.t), dtype=np.float64).reshape(bn.size, 3)
    return [Dirichlet(0, bn, k, vals[:, k]) for k in range(3)]


# --------------------------------------------------------------------------
# Weak forms


@dataclass
class _Frozen:
    """Data held fixed while one potential is solved."""

    data: CellData
    A_qp: NDArray[np.float64]
    A0_qp: NDArray[np.float64]
    A00_qp: NDArray[np.float64]
    E0_qp: NDArray[np.float64]
    gphi: NDArray[np.float64]
    B: NDArray[np.float64]
    curlM: NDArray[np.float64]
    qv: NDArray[np.float64]
    body_pos: NDArray[np.int64]
    body_cells: NDArray[np.int64]
    points: _BodyPoints | None
    facets: FacetData | None
    facet_points: _BodyPoints | None
    facet_dAdt: NDArray[np.float64] | None
    facet_B: NDArray[np.float64] | None
    facet_curlM: NDArray[np.float64] | None


def _freeze(state: EMState) -> _Frozen:
    mesh = state.mesh
    dt = state.dt
    if dt <= 0:
        raise ValueError("time step must be positive")
    x = mesh.nodes
    data = cell_data(mesh, nodes=x)
    conn = mesh.cells
    A = state.A.nodal()
    A0 = state.A.nodal("coeffs0")
    A00 = state.A.nodal("coeffs00")
    A_qp = _interp(A, conn, data.shape)
    A0_qp = _interp(A0, conn, data.shape)
    A00_qp = _interp(A00, conn, data.shape)
    gphi0, _ = cell_fields(state, "coeffs0", x)
    E0 = -gphi0[:, None, :] - (A0_qp - A00_qp) / dt
    gphi, B = cell_fields(state, "coeffs", x)
    curlM = _nodal_curl_M(state, x)
    v_qp = _interp(state.v, conn, data.shape)
    q_qp = _interp(state.q_free[:, None], conn, data.shape)
    qv = q_qp * v_qp

    lookup = _body_lookup(state)
    body_cells = np.flatnonzero(lookup >= 0)
    body_pos = lookup[body_cells]
    points = None
    facets = facet_points = facet_dAdt = facet_B = facet_curlM = None
    if state.body is not None:
        points = _BodyPoints(state, body_pos, conn[body_cells], data.shape)
        itf = interface_arrays(state.body.submap, x)
        facets = facet_data(mesh, itf.inside_cell, itf.local_opposite, x)
        fconn = conn[itf.inside_cell]
        facet_points = _BodyPoints(state, lookup[itf.inside_cell], fconn, facets.shape)
        facet_dAdt = (_interp(A, fconn, facets.shape) - _interp(A0, fconn, facets.shape)) / dt
        facet_B = np.broadcast_to(B[itf.inside_cell][:, None], facet_dAdt.shape)
        facet_curlM = curlM[itf.inside_cell]
    return _Frozen(data, A_qp, A0_qp, A00_qp, E0, gphi, B, curlM, qv, body_pos, body_cells, points,
                   facets, facet_points, facet_dAdt, facet_B, facet_curlM)


def _phi_kernels(state: EMState, fz: _Frozen):
    dt = state.dt
    dAdt = (fz.A_qp - fz.A0_qp) / dt
    body_cells, body_pos = fz.body_cells, fz.body_pos

    def kernel(data: CellData, local):
        gphi = data.gradient(local[0])[:, 0, :]
        E = -gphi[:, None, :] - dAdt
        flux = -EPS0 * (E - fz.E0_qp)
        if body_cells.size:
            Eb = E[body_cells]
            Bb = np.broadcast_to(fz.B[body_cells][:, None], Eb.shape)
            P, _, Jfr = fz.points.response(Eb, Bb)
            J = Jfr + fz.qv[body_cells] + (P - state.P0_qp[body_pos]) / dt + fz.curlM[body_cells][:, None, :]
            flux[body_cells] -= dt * J
        return [data.test_grad(flux[:, :, None, :])]

    facet_kernels = []
    if fz.facets is not None and fz.facets.n_facets:
        def facet_kernel(fd: FacetData, local):
            gphi = fd.gradient(local[0])[:, 0, :]
            E = -gphi[:, None, :] - fz.facet_dAdt
            _, _, Jfr = fz.facet_points.response(E, fz.facet_B)
            flux = Jfr + fz.facet_curlM[:, None, :]
            normal_flux = dt * np.einsum("fqd,fd->fq", flux, fd.normal)
            return [fd.test(normal_flux[:, :, None])]

        facet_kernels.append((fz.facets, facet_kernel))
    return kernel, facet_kernels


def residual_phi(state: EMState, frozen: _Frozen | None = None, jacobian: bool = True):
    """Assembled charge-balance system for ``phi`` (Dirichlet rows applied)."""
    fz = frozen or _freeze(state)
    kernel, fks = _phi_kernels(state, fz)
    return assemble(kernel, [state.phi], state.mesh, fks, phi_dirichlet(state), cells=fz.data, affine=True, jacobian=jacobian)


def _A_kernel(state: EMState, fz: _Frozen):
    dt = state.dt
    body_cells, body_pos = fz.body_cells, fz.body_pos

    def kernel(data: CellData, local):
        A = local[0]
        A_qp = data.at_qp(A)
        gA = data.gradient(A)  # (c, j, k) = d A_j / d x_k
        B = curl_from_gradient(gA)
        value = -EPS0 * (A_qp - 2.0 * fz.A0_qp + fz.A00_qp) / dt**2
        flux = np.repeat((-1.0 / MU0) * gA[:, None], data.shape.shape[0], axis=1)
        if body_cells.size:
            E = -fz.gphi[body_cells][:, None, :] - (A_qp[body_cells] - fz.A0_qp[body_cells]) / dt
            Bb = np.broadcast_to(B[body_cells][:, None], E.shape)
            P, M, Jfr = fz.points.response(E, Bb)
            value[body_cells] += Jfr + (P - state.P0_qp[body_pos]) / dt
            flux[body_cells] -= np.einsum("jki,cqi->cqjk", LEVI_CIVITA, M)
        return [data.test(value) + data.test_grad(flux)]

    return kernel


def _has_nonlinear_magnetization(state: EMState) -> bool:
    return state.body is not None and any(isinstance(m, MagnetoHyperelasticMaterial) for m in state.body.materials.values())


def residual_A(state: EMState, frozen: _Frozen | None = None, jacobian: bool = True):
    """Assembled wave-equation system for ``A`` (Dirichlet rows applied)."""
    fz = frozen or _freeze(state)
    kernel = _A_kernel(state, fz)
    affine = not _has_nonlinear_magnetization(state)
    return assemble(kernel, [state.A], state.mesh, (), A_dirichlet(state), cells=fz.data, affine=affine, jacobian=jacobian)


# --------------------------------------------------------------------------
# Sources and the EM sub-step


def bound_sources(state: EMState) -> None:
    """Refresh cached ``P``, ``M``, ``Jfr`` (at quadrature points and nodal) and ``q_free``.

    Uses the current potentials, the current mesh placement and the body data.
    ``q_free`` is the projected divergence of ``eps0 E + P`` over body cells.
    """
    mesh = state.mesh
    n = mesh.n_nodes
    if state.body is None:
        state.P_qp = np.zeros((0, mesh.dim + 1, 3))
        state.P[:] = 0.0
        state.M[:] = 0.0
        state.Jfr[:] = 0.0
        state.q_free[:] = 0.0
        return
    x = mesh.nodes
    data = cell_data(mesh, nodes=x)
    conn = mesh.cells
    lookup = _body_lookup(state)
    cells = np.flatnonzero(lookup >= 0)
    pos = lookup[cells]
    gphi, B = cell_fields(state, "coeffs", x)
    A_qp = _interp(state.A.nodal(), conn[cells], data.shape)
    A0_qp = _interp(state.A.nodal("coeffs0"), conn[cells], data.shape)
    E = -gphi[cells][:, None, :] - (A_qp - A0_qp) / state.dt
    Bq = np.broadcast_to(B[cells][:, None], E.shape)
    pts = _BodyPoints(state, pos, conn[cells], data.shape)
    P, M, Jfr = pts.response(E, Bq)
    state.P_qp = np.empty_like(P)
    state.P_qp[pos] = P

    sub = Mesh(mesh.dim, x, conn[cells], mesh.cell_region[cells])
    vol = np.abs(data.volume[cells])
    def nodal(cellwise):
        return lumped_average(sub, cellwise, volume=vol)
    state.P = nodal(P.mean(axis=1))
    state.M = nodal(M.mean(axis=1))
    state.Jfr = nodal(Jfr.mean(axis=1))
    Dn = nodal(EPS0 * E.mean(axis=1) + P.mean(axis=1))
    _, grads = shape_gradients(x, sub.cells)
    div = np.einsum("cak,cak->c", Dn[sub.cells][:, :, : mesh.dim], grads)
    state.q_free = nodal(div)
    # nodes untouched by body cells keep zero
    touched = np.zeros(n, dtype=bool)
    touched[sub.cells.ravel()] = True
    for arr in (state.P, state.M, state.Jfr):
        arr[~touched] = 0.0
    state.q_free[~touched] = 0.0


@dataclass
class EMReport:
    phi: list[NewtonReport]
    A: list[NewtonReport]

    @property
    def sweeps(self) -> int:
        return len(self.phi)


def solve_em_step(state: EMState, refresh_sources: bool = True) -> EMReport:
    """Charge balance for ``phi``, then the wave equation for ``A``, repeated.

    Sweeps stop once ``A`` or, from the second sweep on, ``phi`` changes by
    at most ``state.sweep_tol`` relative to its size (or after
    ``state.max_sweeps``).  The caller sets ``state.t`` to
    the new time level and places the mesh before calling.  Cached sources
    are refreshed afterwards.
    """
    if refresh_sources:
        bound_sources(state)
    affine = not _has_nonlinear_magnetization(state)
    reports = EMReport([], [])
    for sweep in range(max(1, state.max_sweeps)):
        fz = _freeze(state)

        def res_phi(fields):
            kernel, fks = _phi_kernels(state, fz)
            return assemble(kernel, fields, state.mesh, fks, phi_dirichlet(state), cells=fz.data, affine=True)

        phi_before = state.phi.coeffs.copy()
        reports.phi.append(newton_solve(res_phi, [state.phi], state.tol_abs, state.tol_rel, state.max_iter, linear=True))
        if sweep > 0:
            # unchanged phi means the A solve would repeat the previous one
            dphi = np.linalg.norm(state.phi.coeffs - phi_before)
            if dphi <= state.sweep_tol * np.linalg.norm(state.phi.coeffs):
                break
        fz = _freeze(state)

        def res_A(fields):
            return assemble(_A_kernel(state, fz), fields, state.mesh, (), A_dirichlet(state), cells=fz.data, affine=affine)

        before = state.A.coeffs.copy()
        reports.A.append(newton_solve(res_A, [state.A], state.tol_abs, state.tol_rel, state.max_iter, linear=affine))
        change = np.linalg.norm(state.A.coeffs - before)
        if change <= state.sweep_tol * np.linalg.norm(state.A.coeffs):
            break
    bound_sources(state)
    return reports


# --------------------------------------------------------------------------
# Diagnostics


@dataclass
class ChargeBalance:
    """Discrete global charge balance over interior nodes for one step."""

    charge_rate: float
    outflow: float
    residual: float
    scale: float

    @property
    def relative(self) -> float:
        return abs(self.residual) / self.scale if self.scale > 0 else 0.0


def charge_balance(state: EMState) -> ChargeBalance:
    """Audit ``(Q - Q0)/dt + outflow = 0`` after a solved step.

    The nodal charge change is the weak divergence of ``D - D0`` and the
    outflow collects the current terms, both summed over nodes off the outer
    boundary and assembled separately from the Newton system.
    """
    fz = _freeze(state)
    dt = state.dt
    mesh = state.mesh
    data = fz.data
    E = -fz.gphi[:, None, :] - (fz.A_qp - fz.A0_qp) / dt
    dD = EPS0 * (E - fz.E0_qp)
    J = np.zeros_like(E)
    if fz.body_cells.size:
        Eb = E[fz.body_cells]
        Bb = np.broadcast_to(fz.B[fz.body_cells][:, None], Eb.shape)
        P, _, Jfr = fz.points.response(Eb, Bb)
        J[fz.body_cells] = Jfr + fz.qv[fz.body_cells] + (P - state.P0_qp[fz.body_pos]) / dt + fz.curlM[fz.body_cells][:, None, :]
    charge = np.zeros(mesh.n_nodes)
    current = np.zeros(mesh.n_nodes)
    conn = mesh.cells.ravel()
    charge += np.bincount(conn, weights=data.test_grad(-dD[:, :, None, :]).ravel(), minlength=mesh.n_nodes)
    current += np.bincount(conn, weights=data.test_grad(-dt * J[:, :, None, :]).ravel(), minlength=mesh.n_nodes)
    if fz.facets is not None and fz.facets.n_facets:
        fd = fz.facets
        gphi = fz.gphi[fd.cell]
        Ef = -gphi[:, None, :] - fz.facet_dAdt
        _, _, Jfr = fz.facet_points.response(Ef, fz.facet_B)
        nf = dt * np.einsum("fqd,fd->fq", Jfr + fz.facet_curlM[:, None, :], fd.normal)
        current += np.bincount(mesh.cells[fd.cell].ravel(), weights=fd.test(nf[:, :, None]).ravel(), minlength=mesh.n_nodes)
    interior = np.ones(mesh.n_nodes, dtype=bool)
    interior[mesh.boundary_nodes()] = False
    fixed = np.concatenate([bc.nodes for bc in state.phi_bcs]) if state.phi_bcs else np.zeros(0, dtype=np.int64)
    interior[fixed] = False
    rate = float(charge[interior].sum()) / dt
    outflow = float(current[interior].sum()) / dt
    scale = max(float(np.abs(charge[interior]).sum()), float(np.abs(current[interior]).sum())) / dt
    return ChargeBalance(rate, outflow, rate + outflow, scale)
