"""Displacement and temperature of the body on its reference (Lagrangian) mesh.

Both unknowns are solved monolithically with Newton.  Electromagnetic data
arrive cellwise from the Eulerian solve (:class:`EMOnBody`) and stay frozen
during the thermomechanical solve.  Residuals are multiplied by the time step
in the temperature equation, as in the electromagnetic forms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .constitutive import (
    LinearMaterial,
    MagnetoHyperelasticMaterial,
    MaterialError,
    StateSample,
    cauchy_stress,
    eval_fluxes,
    eval_linear,
    eval_magnetohyperelastic,
    linear_entropy,
)
from .fem_core import (
    TOL_ABS,
    TOL_REL,
    CellData,
    Dirichlet,
    FacetData,
    Field,
    NewtonReport,
    assemble,
    boundary_facet_data,
    cell_data,
    newton_solve,
)
from .mesh import SubMeshMap

log = logging.getLogger(__name__)

ValueFn = Callable[[NDArray[np.float64], float], NDArray[np.float64]]


class DeformationError(MaterialError):
    """det F became nonpositive in a cell."""

    def __init__(self, cell: int):
        super().__init__(f"det F <= 0 in cell {cell}")
        self.cell = cell


class TemperatureError(MaterialError):
    """Temperature became nonpositive."""


def em_force_density(q, E, Jtot, B, P, P0, dBdt, dt, Jdet):
    """Referential electromagnetic force ``J F`` (N/m^3).

    ``J (q E + Jtot x B - (P - P0)/dt x B - P x dB/dt)``.
    """
    q = np.asarray(q, dtype=np.float64)
    Jdet = np.asarray(Jdet, dtype=np.float64)
    f = (
        q[..., None] * E
        + np.cross(Jtot, B)
        - np.cross((np.asarray(P) - np.asarray(P0)) / dt, B)
        - np.cross(P, dBdt)
    )
    return Jdet[..., None] * f


@dataclass
class EMOnBody:
    """Cellwise electromagnetic data on the body cells (child cell order).

    ``*_prev`` hold the previous step, needed for the rate of ``B`` and the
    previous entropy.
    """

    E: NDArray[np.float64]
    B: NDArray[np.float64]
    E_prev: NDArray[np.float64]
    B_prev: NDArray[np.float64]
    q: NDArray[np.float64]
    Jtot: NDArray[np.float64]
    P: NDArray[np.float64]
    P_prev: NDArray[np.float64]

    @classmethod
    def zeros(cls, n_cells: int) -> EMOnBody:
        z = lambda: np.zeros((n_cells, 3))
        return cls(z(), z(), z(), z(), np.zeros(n_cells), z(), z(), z())


@dataclass
class NodalBC:
    """Prescribed value of one component on a node set; ``value`` may be ``fn(x, t)``."""

    nodes: NDArray[np.int64]
    component: int
    value: float | ValueFn

    def values(self, x: NDArray[np.float64], t: float) -> NDArray[np.float64]:
        if callable(self.value):
            return np.broadcast_to(np.asarray(self.value(x[self.nodes], t), dtype=np.float64), self.nodes.shape)
        return np.full(self.nodes.shape, float(self.value))


@dataclass
class Traction:
    """Traction (Pa, reference area) on child facets with ``marker``."""

    marker: int
    value: NDArray[np.float64] | ValueFn


@dataclass
class TMState:
    """Thermomechanical unknowns and loads on the child mesh of ``submap``."""

    submap: SubMeshMap
    materials: dict
    u: Field
    T: Field
    dt: float
    t: float = 0.0
    em: EMOnBody | None = None
    u_bcs: list[NodalBC] = field(default_factory=list)
    T_bcs: list[NodalBC] = field(default_factory=list)
    tractions: list[Traction] = field(default_factory=list)
    body_force: NDArray[np.float64] | ValueFn = field(default_factory=lambda: np.zeros(3))
    heat_source: float | ValueFn = 0.0
    include_em: bool = True
    tol_abs: float = TOL_ABS
    tol_rel: float = TOL_REL
    max_iter: int = 25
    ramp_steps: int = 10

    def __post_init__(self) -> None:
        if self.em is None:
            self.em = EMOnBody.zeros(self.mesh.n_cells)
        if not callable(self.body_force):
            self.body_force = np.asarray(self.body_force, dtype=np.float64)
        missing = set(np.unique(self.mesh.cell_region).tolist()) - set(self.materials)
        if missing:
            raise KeyError(f"no material for regions {sorted(missing)}")

    @classmethod
    def at_rest(cls, submap: SubMeshMap, materials: dict, dt: float, **kw) -> TMState:
        child = submap.child
        T_ref = next((m.T_ref for m in materials.values() if isinstance(m, LinearMaterial)), 300.0)
        T = Field(child, 1, np.full(child.n_nodes, T_ref), name="T")
        return cls(submap, materials, Field(child, 3, name="u"), T, dt, **kw)

    @property
    def mesh(self):
        return self.submap.child

    @property
    def thermal(self) -> bool:
        return any(getattr(m, "thermal", False) for m in self.materials.values())

    def T_ref_nodal(self) -> NDArray[np.float64]:
        """Reference temperature per node (from any adjacent thermal material)."""
        mesh = self.mesh
        out = np.full(mesh.n_nodes, np.nan)
        for region, mat in self.materials.items():
            if isinstance(mat, LinearMaterial):
                out[mesh.cells[mesh.cell_region == region].ravel()] = mat.T_ref
        return np.where(np.isnan(out), 300.0, out)

    def velocity(self) -> NDArray[np.float64]:
        return (self.u.nodal() - self.u.nodal("coeffs0")) / self.dt

    def rotate_history(self) -> None:
        self.u.rotate_history()
        self.T.rotate_history()


# --------------------------------------------------------------------------
# Weak forms


@dataclass
class _Setup:
    data: CellData
    region_of_cell: NDArray[np.int64]
    u0: NDArray[np.float64]
    u00: NDArray[np.float64]
    T_fixed: NDArray[np.float64]
    eta0: NDArray[np.float64]
    dBdt: NDArray[np.float64]
    convection: FacetData | None
    conv_h: NDArray[np.float64]
    conv_Tref: NDArray[np.float64]
    tractions: list[tuple[FacetData, NDArray[np.float64]]]


def _previous_entropy(state: TMState, data: CellData) -> NDArray[np.float64]:
    """Entropy per quadrature point at the previous time level."""
    mesh = state.mesh
    conn = mesh.cells[data.ids]
    T0 = data.at_qp(state.T.nodal("coeffs0")[conn])[..., 0]
    gradu0 = data.gradient(state.u.nodal("coeffs0")[conn])
    eta0 = np.zeros_like(T0)
    em = state.em
    for region, mat in state.materials.items():
        if not isinstance(mat, LinearMaterial):
            continue
        idx = np.flatnonzero(mesh.cell_region[data.ids] == region)
        if idx.size == 0:
            continue
        nq = T0.shape[1]
        gu = np.broadcast_to(gradu0[idx][:, None], (idx.size, nq, 3, 3))
        E0 = np.broadcast_to(em.E_prev[data.ids[idx]][:, None], (idx.size, nq, 3))
        B0 = np.broadcast_to(em.B_prev[data.ids[idx]][:, None], (idx.size, nq, 3))
        J0 = np.linalg.det(gu + np.eye(3))
        eta0[idx] = linear_entropy(mat, T0[idx], gu, E0, B0, J0)
    return eta0


def _setup(state: TMState) -> _Setup:
    mesh = state.mesh
    data = cell_data(mesh)
    eta0 = _previous_entropy(state, data)
    dBdt = (state.em.B - state.em.B_prev) / state.dt
    conv = None
    h = np.zeros(0)
    Tref = np.zeros(0)
    if state.thermal and mesh.n_facets:
        itf = mesh.facets[state.submap.interface]
        if itf.size:
            conv = boundary_facet_data(mesh, itf)
            mats = [state.materials[int(r)] for r in mesh.cell_region[conv.cell]]
            h = np.array([getattr(m, "h_conv", 0.0) for m in mats])
            keep = h > 0
            if np.any(keep):
                conv = boundary_facet_data(mesh, itf[keep])
                h = h[keep]
                Tref = np.array([getattr(m, "T_ref", 300.0) for m in np.array(mats, dtype=object)[keep]])
            else:
                conv = None
    tractions = []
    for tr in state.tractions:
        sel = mesh.facets[mesh.facet_marker == tr.marker]
        if sel.size == 0:
            raise ValueError(f"no facets with marker {tr.marker} for traction")
        fd = boundary_facet_data(mesh, sel)
        if callable(tr.value):
            vals = np.asarray(tr.value(fd.x.reshape(-1, 3)[:, : mesh.dim], state.t), dtype=np.float64)
            vals = np.broadcast_to(vals, (fd.x.shape[0] * fd.x.shape[1], 3)).reshape(fd.x.shape)
        else:
            vals = np.broadcast_to(np.asarray(tr.value, dtype=np.float64), fd.x.shape)
        tractions.append((fd, vals))
    return _Setup(
        data,
        mesh.cell_region,
        state.u.nodal("coeffs0"),
        state.u.nodal("coeffs00"),
        state.T.nodal().copy(),
        eta0,
        dBdt,
        conv,
        h,
        Tref,
        tractions,
    )


def _material_groups(state: TMState, ids: NDArray[np.int64]):
    regions = state.mesh.cell_region[ids]
    for region in np.unique(regions):
        yield state.materials[int(region)], np.flatnonzero(regions == region)


def _source(value, data: CellData, t: float, shape: tuple) -> NDArray[np.float64]:
    """Constant or ``fn(X, t)`` load at the quadrature points, ``(c, q) + shape``."""
    target = data.x.shape[:2] + shape
    if not callable(value):
        return np.broadcast_to(np.asarray(value, dtype=np.float64), target)
    dim = data.grad.shape[1] - 1
    pts = data.x.reshape(-1, 3)[:, :dim]
    return np.asarray(value(pts, t), dtype=np.float64).reshape(target)


def _make_kernels(state: TMState, st: _Setup, *, static: bool, load: float, solve_T: bool):
    dt = state.dt
    em = state.em
    use_em = state.include_em
    mesh = state.mesh

    def kernel(data: CellData, local):
        ids = data.ids
        conn = mesh.cells[ids]
        u = local[0]
        T = local[1] if solve_T else st.T_fixed[conn]
        nc, nq = ids.size, data.shape.shape[0]
        gradu = data.gradient(u)
        F = gradu + np.eye(3)
        Jdet = np.linalg.det(F)
        if np.any(Jdet <= 0):
            raise DeformationError(int(ids[np.flatnonzero(Jdet <= 0)[0]]))
        Tq = data.at_qp(T)[..., 0]
        if np.any(Tq <= 0):
            bad = int(ids[np.flatnonzero(np.any(Tq <= 0, axis=1))[0]])
            raise TemperatureError(f"nonpositive temperature in cell {bad}")
        gradT = data.gradient(T)[:, 0, :]
        if static:
            v = np.zeros((nc, nq, 3))
        else:
            v = data.at_qp(u - st.u0[conn]) / dt
        E = np.broadcast_to(em.E[ids][:, None], (nc, nq, 3)) if use_em else np.zeros((nc, nq, 3))
        B = np.broadcast_to(em.B[ids][:, None], (nc, nq, 3)) if use_em else np.zeros((nc, nq, 3))

        flux_u = np.zeros((nc, nq, 3, 3))
        val_u = np.zeros((nc, nq, 3))
        val_T = np.zeros((nc, nq, 1))
        flux_T = np.zeros((nc, nq, 1, 3))
        rho = np.zeros(nc)
        r_heat = _source(state.heat_source, data, state.t, ()) if solve_T else None
        for mat, idx in _material_groups(state, ids):
            rho[idx] = mat.rho0
            Fg = np.broadcast_to(F[idx][:, None], (idx.size, nq, 3, 3))
            Jg = np.broadcast_to(Jdet[idx][:, None], (idx.size, nq))
            if isinstance(mat, MagnetoHyperelasticMaterial):
                _, N, M = eval_magnetohyperelastic(mat, F[idx], B[idx, 0])
                N = np.broadcast_to(N[:, None], (idx.size, nq, 3, 3))
                M = np.broadcast_to(M[:, None], (idx.size, nq, 3))
                P = np.zeros((idx.size, nq, 3))
            else:
                gu = np.broadcast_to(gradu[idx][:, None], (idx.size, nq, 3, 3))
                gT = np.broadcast_to(gradT[idx][:, None], (idx.size, nq, 3))
                s = StateSample.build(Tq[idx], gu, E[idx], B[idx], gT, v[idx])
                eta, N, P, M = eval_linear(mat, s)
                if solve_T:
                    Q, Jfr = eval_fluxes(mat, s.gradT, s.Escr, s.Jdet, s.T)
                    Tg = Tq[idx]
                    val_T[idx, :, 0] = (
                        mat.rho0 * (eta - st.eta0[ids[idx]])
                        - dt * mat.rho0 * r_heat[idx] / Tg
                        + dt * np.einsum("cqi,cqi->cq", Q, s.gradT) / Tg**2
                        - dt * s.Jdet / Tg * np.einsum("cqi,cqi->cq", s.Escr, Jfr)
                    )
                    flux_T[idx, :, 0, :] = -dt * Q / Tg[..., None]
            sigma = cauchy_stress(N, Fg, Jg, P, E[idx], M, B[idx])
            Finv = np.linalg.inv(F[idx])
            flux_u[idx] = Jg[..., None, None] * np.einsum("ckj,cqji->cqik", Finv, sigma)
        if not static:
            acc = data.at_qp(u - 2.0 * st.u0[conn] + st.u00[conn]) / dt**2
            val_u += rho[:, None, None] * acc
        val_u -= load * rho[:, None, None] * _source(state.body_force, data, state.t, (3,))
        if use_em:
            JF = em_force_density(em.q[ids], em.E[ids], em.Jtot[ids], em.B[ids], em.P[ids], em.P_prev[ids],
                                  st.dBdt[ids], dt, Jdet)
            val_u -= load * JF[:, None, :]
        out = [data.test(val_u) + data.test_grad(flux_u)]
        if solve_T:
            out.append(data.test(val_T) + data.test_grad(flux_T))
        return out

    facet_kernels = []
    for fd, tvals in st.tractions:
        def traction_kernel(f: FacetData, local, tvals=tvals):
            out = [-load * f.test(tvals)]
            if solve_T:
                out.append(np.zeros_like(local[1]))
            return out

        facet_kernels.append((fd, traction_kernel))
    if solve_T and st.convection is not None:
        def convection_kernel(f: FacetData, local):
            Tq = f.at_qp(local[1])[..., 0]
            g = dt * st.conv_h[:, None] * (Tq - st.conv_Tref[:, None]) / Tq
            return [np.zeros_like(local[0]), f.test(g[..., None])]

        facet_kernels.append((st.convection, convection_kernel))
    return kernel, facet_kernels


def _dirichlet(state: TMState, solve_T: bool, load: float = 1.0) -> list[Dirichlet]:
    x = state.mesh.nodes
    bcs = [Dirichlet(0, bc.nodes, bc.component, load * bc.values(x, state.t)) for bc in state.u_bcs]
    if solve_T:
        bcs += [Dirichlet(1, bc.nodes, 0, bc.values(x, state.t)) for bc in state.T_bcs]
        passive = _non_thermal_nodes(state)
        if passive.size:
            bcs.append(Dirichlet(1, passive, 0, state.T_ref_nodal()[passive]))
    return bcs


def _non_thermal_nodes(state: TMState) -> NDArray[np.int64]:
    mesh = state.mesh
    touched = np.zeros(mesh.n_nodes, dtype=bool)
    for region, mat in state.materials.items():
        if getattr(mat, "thermal", False):
            touched[mesh.cells[mesh.cell_region == region].ravel()] = True
    return np.flatnonzero(~touched)


def residual_u(state: TMState, static: bool = False, load: float = 1.0):
    """Momentum system for ``u`` alone (temperature held at its current value)."""
    st = _setup(state)
    kernel, fks = _make_kernels(state, st, static=static, load=load, solve_T=False)
    return assemble(kernel, [state.u], state.mesh, fks, _dirichlet(state, False, load), cells=st.data)


def residual_T(state: TMState):
    """Entropy-balance rows of the monolithic system (temperature block)."""
    st = _setup(state)
    kernel, fks = _make_kernels(state, st, static=False, load=1.0, solve_T=True)
    system = assemble(kernel, [state.u, state.T], state.mesh, fks, _dirichlet(state, True), cells=st.data)
    n = state.u.size
    return system.residual[n:], system.jacobian[n:, n:]


def residual_uT(state: TMState):
    """Monolithic ``(u, T)`` system."""
    st = _setup(state)
    kernel, fks = _make_kernels(state, st, static=False, load=1.0, solve_T=state.thermal)
    fields = [state.u, state.T] if state.thermal else [state.u]
    return assemble(kernel, fields, state.mesh, fks, _dirichlet(state, state.thermal), cells=st.data)


def _check_temperature(state: TMState) -> None:
    if np.any(state.T.coeffs <= 0):
        node = int(np.flatnonzero(state.T.coeffs <= 0)[0])
        raise TemperatureError(f"nonpositive temperature at node {node}")


def solve_tm_step(state: TMState) -> NewtonReport:
    """Backward-Euler step for ``(u, T)`` at ``state.t`` (set by the caller)."""
    st = _setup(state)
    solve_T = state.thermal
    kernel, fks = _make_kernels(state, st, static=False, load=1.0, solve_T=solve_T)
    fields = [state.u, state.T] if solve_T else [state.u]
    bcs = _dirichlet(state, solve_T)

    def res(fs):
        return assemble(kernel, fs, state.mesh, fks, bcs, cells=st.data)

    report = newton_solve(res, fields, state.tol_abs, state.tol_rel, state.max_iter)
    _check_temperature(state)
    return report


def solve_static(state: TMState, ramp_steps: int | None = None) -> list[NewtonReport]:
    """Static equilibrium of ``u`` with loads ramped in equal increments.

    Inertia and velocity are dropped and the temperature is held.  Histories
    of ``u`` are set to the result so a following dynamic run starts at rest.
    """
    n = state.ramp_steps if ramp_steps is None else ramp_steps
    if n < 1:
        raise ValueError("ramp_steps must be at least 1")
    st = _setup(state)
    reports = []
    for k in range(1, n + 1):
        load = k / n
        kernel, fks = _make_kernels(state, st, static=True, load=load, solve_T=False)
        bcs = _dirichlet(state, False, load)

        def res(fs, kernel=kernel, fks=fks, bcs=bcs):
            return assemble(kernel, fs, state.mesh, fks, bcs, cells=st.data)

        reports.append(newton_solve(res, [state.u], state.tol_abs, state.tol_rel, state.max_iter))
        log.debug("static load %.2f: %d Newton iterations", load, reports[-1].iterations)
    state.u.coeffs0 = state.u.coeffs.copy()
    state.u.coeffs00 = state.u.coeffs.copy()
    return reports
