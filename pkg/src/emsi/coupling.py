"""Staggered time stepping of the body and the surrounding field.

One step: electromagnetic data are pulled onto the body cells, the
thermomechanical problem is solved on the reference mesh, the body placement
is pushed to the Eulerian mesh and the air is morphed around it, the
potentials are solved on the moved mesh, and the histories advance.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from . import EPS0
from .em_solver import (
    BodyState,
    ChargeBalance,
    EMState,
    cell_fields,
    charge_balance,
    curl_from_gradient,
    recover_EB,
    solve_em_step,
)
from .fem_core import NewtonError, SingularMatrixError, pad3, shape_gradients
from .mesh import MeshError
from .morphing import MorphOperator, build, morph, quality_report
from .tm_solver import EMOnBody, TMState, solve_tm_step
from .tm_solver import solve_static as solve_tm_static

log = logging.getLogger(__name__)

# Time step of the static passes (s); long enough that all rate terms vanish.
STATIC_DT = 1e6

MotionFn = Callable[[NDArray[np.float64], float], NDArray[np.float64]]
Observer = Callable[["CoupledState"], dict]


class CouplingError(RuntimeError):
    """A phase of the staggered step failed."""

    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"{phase} phase failed at step: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class CoupledState:
    """Everything advanced by :func:`step`.

    Either ``tm`` is given (the body is solved) or ``motion`` prescribes the
    body displacement ``u(X, t)`` on the reference nodes; with neither the
    body stays at rest.  A list in ``charge_log`` collects the global
    charge audit of every field solve.
    """

    em: EMState
    tm: TMState | None
    dt: float
    t: float = 0.0
    steps: int = 0
    motion: MotionFn | None = None
    morph_op: MorphOperator | None = None
    reference_nodes: NDArray[np.float64] | None = None
    sub_iterations: int = 1
    retry: bool = True
    events: list[str] = field(default_factory=list)
    body_u: NDArray[np.float64] | None = None
    body_u0: NDArray[np.float64] | None = None
    charge_log: list[ChargeBalance] | None = None

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("time step must be positive")
        mesh = self.em.mesh
        if self.reference_nodes is None:
            self.reference_nodes = mesh.nodes.copy()
        submap = self.submap
        if self.morph_op is None:
            self.morph_op = build(mesh, submap)
        if submap is not None and self.body_u is None:
            n = submap.child.n_nodes
            self.body_u = np.zeros((n, 3))
            self.body_u0 = np.zeros((n, 3))
        if submap is not None and self.em.body is None:
            mats = self.tm.materials if self.tm is not None else {}
            self.em.body = BodyState.at_rest(submap, mats)
            self.em.__post_init__()
        self.em.dt = self.dt
        if self.tm is not None:
            self.tm.dt = self.dt
            if self.tm.submap is not submap:
                raise ValueError("thermomechanical state and field body use different submesh maps")

    @property
    def submap(self):
        if self.tm is not None:
            return self.tm.submap
        return None if self.em.body is None else self.em.body.submap

    @property
    def mesh(self):
        return self.em.mesh


# --------------------------------------------------------------------------
# Transfers


def pull_em_to_material(state: CoupledState, previous: tuple | None = None) -> EMOnBody:
    """Cellwise field data on the body cells at the current placement.

    ``E`` and ``B`` come from the potentials of the parent cells; the total
    charge is the divergence of the projected ``eps0 E``; the total current
    collects the cached sources.  ``previous`` holds ``(E, B)`` of the last
    pull; without it the previous-step values equal the current ones (start
    from rest).
    """
    em = state.em
    submap = state.submap
    if submap is None:
        raise ValueError("no body to pull onto")
    if submap.parent is not em.mesh:
        raise ValueError("submesh map does not belong to the field mesh")
    mesh = em.mesh
    cells = submap.parent_cell_of_child
    x = mesh.nodes
    gphi, B = cell_fields(em, "coeffs", x)
    dAdt = (em.A.nodal() - em.A.nodal("coeffs0")) / em.dt
    conn = mesh.cells[cells]
    E = -gphi[cells] - dAdt[conn].mean(axis=1)
    B = B[cells]

    Enodal, _ = recover_EB(em.phi, em.A, em.A.coeffs0, em.dt, x)
    _, grads = shape_gradients(x, conn)
    grads = pad3(grads)
    q = EPS0 * np.einsum("cak,cak->c", Enodal.nodal()[conn], grads)
    curlM = curl_from_gradient(np.einsum("cak,cad->ckd", em.M[conn], grads))
    v = em.v
    Jtot = (
        em.Jfr[conn].mean(axis=1)
        + (em.q_free[:, None] * v)[conn].mean(axis=1)
        + (em.P - em.P0)[conn].mean(axis=1) / em.dt
        + curlM
    )
    P = em.P_qp.mean(axis=1) if em.P_qp.size else np.zeros((cells.size, 3))
    P0 = em.P0_qp.mean(axis=1) if em.P0_qp.size else np.zeros((cells.size, 3))
    E_prev = E.copy() if previous is None else np.array(previous[0], copy=True)
    B_prev = B.copy() if previous is None else np.array(previous[1], copy=True)
    return EMOnBody(E, B, E_prev, B_prev, q, Jtot, P, P0)


def push_body(state: CoupledState, u: NDArray[np.float64], u0: NDArray[np.float64],
              T: NDArray[np.float64] | None, gradT: NDArray[np.float64] | None) -> None:
    """Hand the body placement, velocity and temperature to the field side."""
    em = state.em
    submap = state.submap
    body = em.body
    child = submap.child
    pn = submap.parent_node_of_child
    _, grads = shape_gradients(child.nodes, child.cells)
    body.gradu = np.einsum("cak,cad->ckd", u[child.cells], pad3(grads))
    v = np.zeros((em.mesh.n_nodes, 3))
    v[pn] = (u - u0) / state.dt
    body.v = v
    if T is not None:
        Tn = np.array(body.T, dtype=np.float64, copy=True)
        Tn[pn] = T
        body.T = Tn
        body.gradT = gradT


def _place_mesh(state: CoupledState, u: NDArray[np.float64]) -> None:
    op = state.morph_op
    X = state.reference_nodes
    dim = state.mesh.dim
    anchors = X[op.fixed_ids].copy()
    submap = state.submap
    if submap is not None:
        pn = submap.parent_node_of_child
        pos = np.searchsorted(op.fixed_ids, pn)
        anchors[pos] = X[pn] + u[:, :dim]
    new = morph(op, X, anchors)
    report = quality_report(state.mesh, new, X)
    if report.inverted:
        raise MeshError(f"morphing inverted {report.inverted} cells (worst cell {report.worst_cell})")
    state.mesh.nodes = new


# --------------------------------------------------------------------------
# Driver


def _snapshot(state: CoupledState):
    em_mesh = state.em.mesh
    nodes = em_mesh.nodes.copy()
    mesh_ref = state.em.mesh
    # keep shared mesh and submap objects, copy everything mutable
    memo = {id(mesh_ref): mesh_ref}
    if state.submap is not None:
        memo[id(state.submap)] = state.submap
        memo[id(state.submap.child)] = state.submap.child
    return copy.deepcopy(state, memo), nodes


def _restore(state: CoupledState, snap) -> None:
    saved, nodes = snap
    memo = {id(state.em.mesh): state.em.mesh}
    if state.submap is not None:
        memo[id(state.submap)] = state.submap
        memo[id(state.submap.child)] = state.submap.child
    state.__dict__.update(copy.deepcopy(saved, memo).__dict__)
    state.em.mesh.nodes = nodes


def _advance(state: CoupledState, dt: float) -> None:
    t_new = state.t + dt
    em, tm = state.em, state.tm
    em.dt = dt
    previous = (tm.em.E, tm.em.B) if tm is not None and state.steps > 0 else None
    for it in range(max(1, state.sub_iterations)):
        if tm is not None:
            tm.dt = dt
            tm.t = t_new
            tm.em = pull_em_to_material(state, previous)
            try:
                solve_tm_step(tm)
            except (NewtonError, SingularMatrixError, MeshError, ValueError) as exc:
                raise CouplingError("TM", exc) from exc
            u = tm.u.nodal()
            u0 = tm.u.nodal("coeffs0")
            T = tm.T.nodal()[:, 0] if tm.thermal else None
            gradT = None
            if tm.thermal:
                child = tm.mesh
                _, g = shape_gradients(child.nodes, child.cells)
                gradT = pad3(np.einsum("ca,cad->cd", T[child.cells], g))
        elif state.motion is not None:
            child = state.submap.child
            u = pad3(np.asarray(state.motion(child.nodes, t_new), dtype=np.float64).reshape(child.n_nodes, -1))
            u0 = state.body_u0
            T = gradT = None
        else:
            u = u0 = None
        if u is not None:
            state.body_u = u.copy()
            push_body(state, u, u0, T, gradT)
            try:
                _place_mesh(state, u)
            except MeshError as exc:
                raise CouplingError("morph", exc) from exc
        em.t = t_new
        try:
            solve_em_step(em)
        except (NewtonError, SingularMatrixError, MeshError, ValueError) as exc:
            raise CouplingError("EM", exc) from exc
    if state.charge_log is not None:
        # the audit needs the histories of this step, so it runs before rotation
        state.charge_log.append(charge_balance(em))
    em.rotate_history()
    if tm is not None:
        tm.rotate_history()
    if state.body_u is not None:
        state.body_u0 = state.body_u.copy()
    state.t = t_new


def step(state: CoupledState) -> CoupledState:
    """Advance by one time step (retried once as two half steps on failure)."""
    snap = _snapshot(state) if state.retry else None
    try:
        _advance(state, state.dt)
    except CouplingError as exc:
        if not state.retry:
            raise
        msg = f"step {state.steps + 1} at t={state.t:.6g}: {exc.phase} failed ({exc.cause}); retrying with dt/2"
        log.warning(msg)
        _restore(state, snap)
        state.events.append(msg)
        half = 0.5 * state.dt
        _advance(state, half)
        _advance(state, half)
        state.em.dt = state.dt
        if state.tm is not None:
            state.tm.dt = state.dt
    state.steps += 1
    return state


def run(state: CoupledState, t_max: float, observers: list[Observer] | None = None) -> list[dict]:
    """Step until ``t_max`` (``ceil((t_max - t)/dt)`` steps), observing after each."""
    n = max(0, math.ceil((t_max - state.t) / state.dt - 1e-9))
    log_rows = []
    for _ in range(n):
        step(state)
        row = {"step": state.steps, "t": state.t}
        for obs in observers or ():
            row.update(obs(state))
        log_rows.append(row)
    return log_rows


def _freeze_rates(em: EMState) -> None:
    # histories equal to the current solution: all rates vanish
    em.rotate_history()
    em.rotate_history()


def solve_static(state: CoupledState, max_iter: int = 20, tol: float = 1e-8,
                 ramp_steps: int | None = None, static_dt: float = STATIC_DT) -> list[float]:
    """Static equilibrium of body and field at ``state.t`` by alternating solves.

    Each pass solves the field, pulls it onto the body, solves static
    equilibrium (loads ramped on the first pass only), places the mesh and
    repeats until the displacement changes by at most ``tol`` relative to its
    size.  Passes after the second are accelerated with Aitken relaxation of
    the displacement.  The passes use the time step ``static_dt`` so every rate term
    vanishes.  Returns the relative change of every pass.  Histories are left
    at the static solution, so a following dynamic run starts at rest.
    """
    em, tm = state.em, state.tm
    em.t = state.t
    changes: list[float] = []

    def field_solve():
        em.dt = static_dt
        try:
            solve_em_step(em)
        except (NewtonError, SingularMatrixError, MeshError, ValueError) as exc:
            raise CouplingError("EM", exc) from exc
        finally:
            em.dt = state.dt
        _freeze_rates(em)

    field_solve()
    if tm is None:
        return changes
    tm.t = state.t
    omega = 1.0
    r_prev = None
    for it in range(max_iter):
        before = tm.u.coeffs.copy()
        tm.em = pull_em_to_material(state)
        tm.dt = static_dt
        try:
            # later passes start next to the solution and skip the ramp
            solve_tm_static(tm, ramp_steps if it == 0 else 1)
        except (NewtonError, SingularMatrixError, MeshError, ValueError) as exc:
            raise CouplingError("TM", exc) from exc
        finally:
            tm.dt = state.dt
        r = tm.u.coeffs - before
        if r_prev is not None:
            dr = r - r_prev
            denom = float(dr @ dr)
            if denom > 0:
                omega = -omega * float(r_prev @ dr) / denom
        size = np.linalg.norm(tm.u.coeffs)
        change = np.linalg.norm(r) / size if size > 0 else 0.0
        changes.append(float(change))
        log.debug("static pass %d: relative change %.3e, relaxation %.3f", it + 1, change, omega)
        converged = change <= tol
        if not converged:
            tm.u.coeffs = before + omega * r
        r_prev = r
        u = tm.u.nodal()
        tm.u.coeffs0 = tm.u.coeffs.copy()
        tm.u.coeffs00 = tm.u.coeffs.copy()
        state.body_u = u.copy()
        state.body_u0 = u.copy()
        push_body(state, u, u, None, None)
        try:
            _place_mesh(state, u)
        except MeshError as exc:
            raise CouplingError("morph", exc) from exc
        field_solve()
        if converged:
            break
    tm.em = pull_em_to_material(state)
    return changes
