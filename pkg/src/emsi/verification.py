"""Independent oracles: field identities, Maxwell symmetry, manufactured solutions.

The field identities are checked pointwise on analytic fields.  Every field
component is a finite sum of monomials and plane-wave sines, so derivatives
of any order are exact expressions; products are differentiated with the
product rule.  Nothing here calls the assembly kernels except the
manufactured-solution runs, which exist to measure them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from numpy.typing import NDArray

from . import C_LIGHT, EPS0, MU0
from .constitutive import (
    LEVI_CIVITA,
    LinearMaterial,
    MagnetoHyperelasticMaterial,
    StateSample,
    entropy_production,
    eval_fluxes,
    eval_linear,
    eval_magnetohyperelastic,
    isotropic_voigt,
    mh_energy,
    pzt5h,
)

DEFAULT_SEED = 20240607
FD_FIRST = 1e-5
FD_SECOND = 1e-4

# --------------------------------------------------------------------------
# Exact scalar expressions


@dataclass(frozen=True)
class Monomial:
    """``coef * x^px * y^py * z^pz * (t/tau)^pt``."""

    coef: float
    powers: tuple[int, int, int, int]
    tau: float = 1.0

    def __call__(self, x: NDArray[np.float64], t: NDArray[np.float64]) -> NDArray[np.float64]:
        px, py, pz, pt = self.powers
        return self.coef * x[:, 0] ** px * x[:, 1] ** py * x[:, 2] ** pz * (t / self.tau) ** pt

    def d(self, var: int) -> Monomial | None:
        p = self.powers[var]
        if p == 0:
            return None
        powers = list(self.powers)
        powers[var] -= 1
        scale = p / self.tau if var == 3 else p
        return Monomial(self.coef * scale, tuple(powers), self.tau)


@dataclass(frozen=True)
class Wave:
    """``amp * sin(k.x - omega t + phase)``."""

    amp: float
    k: tuple[float, float, float]
    omega: float
    phase: float = 0.0

    def __call__(self, x: NDArray[np.float64], t: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.amp * np.sin(x @ np.asarray(self.k) - self.omega * t + self.phase)

    def d(self, var: int) -> Wave | None:
        factor = -self.omega if var == 3 else self.k[var]
        if factor == 0.0:
            return None
        return Wave(self.amp * factor, self.k, self.omega, self.phase + 0.5 * math.pi)


@dataclass(frozen=True)
class Scalar:
    """Sum of terms with exact derivatives; ``var`` 0-2 are x, y, z and 3 is t."""

    terms: tuple = ()

    def __call__(self, x, t) -> NDArray[np.float64]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        out = np.zeros(x.shape[0])
        for term in self.terms:
            out += term(x, t)
        return out

    def d(self, var: int) -> Scalar:
        return Scalar(tuple(dt for dt in (term.d(var) for term in self.terms) if dt is not None))

    def __add__(self, other: Scalar) -> Scalar:
        return Scalar(self.terms + other.terms)

    def __sub__(self, other: Scalar) -> Scalar:
        return self + other.scaled(-1.0)

    def scaled(self, c: float) -> Scalar:
        out = []
        for term in self.terms:
            if isinstance(term, Monomial):
                out.append(Monomial(term.coef * c, term.powers, term.tau))
            else:
                out.append(Wave(term.amp * c, term.k, term.omega, term.phase))
        return Scalar(tuple(out))


ZERO = Scalar()
Vector = tuple[Scalar, Scalar, Scalar]
ZERO_VEC: Vector = (ZERO, ZERO, ZERO)


def _grad(s: Scalar) -> Vector:
    return (s.d(0), s.d(1), s.d(2))


def _dt(v: Vector) -> Vector:
    return tuple(c.d(3) for c in v)


def _curl(v: Vector) -> Vector:
    return (v[2].d(1) - v[1].d(2), v[0].d(2) - v[2].d(0), v[1].d(0) - v[0].d(1))


def _div(v: Vector) -> Scalar:
    return v[0].d(0) + v[1].d(1) + v[2].d(2)


def _add(a: Vector, b: Vector) -> Vector:
    return tuple(p + q for p, q in zip(a, b))


def _scale(a: Vector, c: float) -> Vector:
    return tuple(p.scaled(c) for p in a)


def _eval(v: Vector, x, t) -> NDArray[np.float64]:
    return np.stack([c(x, t) for c in v], axis=-1)


def _jacobian(v: Vector, x, t) -> NDArray[np.float64]:
    """``out[n, i, j] = d v_i / d x_j``."""
    return np.stack([np.stack([c.d(j)(x, t) for j in range(3)], axis=-1) for c in v], axis=-2)


# --------------------------------------------------------------------------
# Field sets


@dataclass
class AnalyticFieldSet:
    """Potentials and material fields with exact derivatives.

    ``phi`` and ``A`` generate ``E = -grad phi - dA/dt`` and ``B = curl A``.
    Charge ``q = div D`` and current ``J = curl H - dD/dt`` follow from the
    field equations, so Maxwell's equations hold by construction and the free
    current is whatever is left after the bound parts.  ``length`` and
    ``time`` are the scales used for finite-difference steps.
    """

    phi: Scalar = ZERO
    A: Vector = ZERO_VEC
    P: Vector = ZERO_VEC
    M: Vector = ZERO_VEC
    v: Vector = ZERO_VEC
    length: float = 1.0
    time: float = 1.0
    name: str = ""

    def __post_init__(self) -> None:
        self.E: Vector = _add(_scale(_grad(self.phi), -1.0), _scale(_dt(self.A), -1.0))
        self.B: Vector = _curl(self.A)
        self.D: Vector = _scale(self.E, EPS0)
        self.H: Vector = _scale(self.B, 1.0 / MU0)
        self.Dfrak: Vector = _add(self.D, self.P)
        self.Hfrak: Vector = _add(self.H, _scale(self.M, -1.0))
        self.q: Scalar = _div(self.D)
        self.J: Vector = _add(_curl(self.H), _scale(_dt(self.D), -1.0))
        self.Jfr: Vector = _add(self.J, _scale(_add(_dt(self.P), _curl(self.M)), -1.0))

    def fields(self) -> dict[str, Vector]:
        return {"E": self.E, "B": self.B, "D": self.D, "H": self.H, "P": self.P, "M": self.M,
                "Jfr": self.Jfr, "J": self.J, "v": self.v, "A": self.A, "phi": (self.phi, ZERO, ZERO)}

    def value(self, name: str, x, t) -> NDArray[np.float64]:
        return _eval(self.fields()[name], x, t)

    def self_check(self, x, t, h: float = FD_FIRST) -> float:
        """Largest relative gap between exact first/second derivatives and central FD."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        worst = 0.0
        steps = [h * self.length] * 3 + [h * self.time]
        for vec in (self.fields()[k] for k in ("phi", "A", "P", "M", "v", "E", "B")):
            for comp in vec:
                for var in range(4):
                    exact = comp.d(var)(x, t)
                    fd = _central(comp, x, t, var, steps[var])
                    worst = max(worst, _rel(exact, fd))
            for comp in vec[:1] if vec is self.fields()["phi"] else vec:
                for var in range(4):
                    first = comp.d(var)
                    s2 = FD_SECOND * (self.time if var == 3 else self.length)
                    worst = max(worst, _rel(first.d(var)(x, t), _central(first, x, t, var, s2)))
        return worst


def _central(s: Scalar, x, t, var: int, h: float) -> NDArray[np.float64]:
    xp, xm = x.copy(), x.copy()
    tp = tm = np.asarray(t, dtype=np.float64)
    if var == 3:
        tp, tm = t + h, t - h
    else:
        xp[:, var] += h
        xm[:, var] -= h
    return (s(xp, tp) - s(xm, tm)) / (2.0 * h)


def _rel(a, b) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def _random_poly(rng: np.random.Generator, amp: float, tau: float, degree: int = 2, n_terms: int = 4) -> Scalar:
    terms = []
    for _ in range(n_terms):
        powers = tuple(int(p) for p in rng.integers(0, degree + 1, size=4))
        terms.append(Monomial(amp * float(rng.standard_normal()), powers, tau))
    return Scalar(tuple(terms))


def random_polynomial_set(rng: np.random.Generator, static: bool = False, vacuum: bool = False) -> AnalyticFieldSet:
    """Random low-order polynomial potentials and material fields.

    Amplitudes are balanced so electric and magnetic terms are comparable:
    ``phi ~ c A``, ``P ~ eps0 c`` and ``M ~ 1/mu0`` with time measured in
    ``tau = L/c``.
    """
    tau = 1.0 / C_LIGHT

    def poly(amp):
        s = _random_poly(rng, amp, tau)
        if static:
            s = Scalar(tuple(Monomial(m.coef, m.powers[:3] + (0,), tau) for m in s.terms))
        return s

    phi = poly(C_LIGHT)
    A = tuple(poly(1.0) for _ in range(3))
    if vacuum:
        P = M = ZERO_VEC
    else:
        P = tuple(poly(EPS0 * C_LIGHT) for _ in range(3))
        M = tuple(poly(1.0 / MU0) for _ in range(3))
    v = tuple(poly(1.0) for _ in range(3))
    return AnalyticFieldSet(phi, A, P, M, v, length=1.0, time=tau, name="polynomial")


def plane_wave_set(k=(1.0, 2.0, -0.5), polarization=(2.0, -1.0, 0.0), amp: float = 1.0, phase: float = 0.3) -> AnalyticFieldSet:
    """Transverse vacuum plane wave ``A = a sin(k.x - omega t)`` with ``omega = c|k|``.

    The polarization is projected orthogonal to ``k`` so charge and current vanish.
    """
    kv = np.asarray(k, dtype=np.float64)
    a = np.asarray(polarization, dtype=np.float64)
    a = a - kv * (a @ kv) / (kv @ kv)
    a *= amp / np.linalg.norm(a)
    omega = C_LIGHT * float(np.linalg.norm(kv))
    A = tuple(Scalar((Wave(float(a[i]), tuple(kv), omega, phase),)) for i in range(3))
    return AnalyticFieldSet(ZERO, A, length=1.0 / float(np.linalg.norm(kv)), time=1.0 / omega, name="plane wave")


def sample_points(rng: np.random.Generator, fs: AnalyticFieldSet, n: int = 20):
    x = rng.uniform(-1.0, 1.0, size=(n, 3)) * fs.length
    t = rng.uniform(0.0, 1.0, size=n) * fs.time
    return x, t


# --------------------------------------------------------------------------
# Identities


class IdentityResult(NamedTuple):
    residual: float  # max abs residual over points and components
    scale: float  # max abs of the individual terms
    relative: float


def _result(residual: NDArray[np.float64], *terms: NDArray[np.float64]) -> IdentityResult:
    r = float(np.max(np.abs(residual))) if residual.size else 0.0
    s = max((float(np.max(np.abs(term))) for term in terms if term.size), default=0.0)
    return IdentityResult(r, s, r / s if s > 0.0 else r)


def check_free_current(fs: AnalyticFieldSet, x, t) -> IdentityResult:
    """Free current from the bound split against ``-d(Dfrak)/dt + curl(Hfrak)``.

    Also checks ``div Dfrak = q + div P`` (free charge).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dD = _eval(_dt(fs.Dfrak), x, t)
    curlH = _eval(_curl(fs.Hfrak), x, t)
    via_frak = -dD + curlH
    via_split = _eval(fs.J, x, t) - _eval(_dt(fs.P), x, t) - _eval(_curl(fs.M), x, t)
    res_J = via_frak - via_split
    q_free = fs.q(x, t) + _div(fs.P)(x, t)
    res_q = _div(fs.Dfrak)(x, t) - q_free
    a = _result(res_J, via_frak, via_split, dD, curlH)
    b = _result(res_q, q_free, fs.q(x, t))
    return a if a.relative >= b.relative else b


def _cross(a, b):
    return np.cross(a, b)


def _dot(a, b):
    return np.einsum("ni,ni->n", a, b)


def momentum_terms(fs: AnalyticFieldSet, x, t, h_fd: float | None = None):
    """``(dG/dt, div m, F)`` with ``G = Dfrak x B`` and Minkowski stress ``m``.

    With ``h_fd`` the time and space derivatives of ``G`` and ``m`` are
    central differences with steps ``h_fd`` times the set's scales.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))

    def G(xx, tt):
        return _cross(_eval(fs.Dfrak, xx, tt), _eval(fs.B, xx, tt))

    def m(xx, tt):
        H, B, D, E = (_eval(getattr(fs, k), xx, tt) for k in ("H", "B", "D", "E"))
        iso = -0.5 * (_dot(H, B) + _dot(D, E))
        # m[n, j, i] = iso delta_ji + H_i B_j + D_j E_i
        return iso[:, None, None] * np.eye(3) + np.einsum("ni,nj->nji", H, B) + np.einsum("nj,ni->nji", D, E)

    if h_fd is None:
        dfrak, B = _eval(fs.Dfrak, x, t), _eval(fs.B, x, t)
        dG = _cross(_eval(_dt(fs.Dfrak), x, t), B) + _cross(dfrak, _eval(_dt(fs.B), x, t))
        H, D, E = (_eval(getattr(fs, k), x, t) for k in ("H", "D", "E"))
        gH, gB, gD, gE = (_jacobian(getattr(fs, k), x, t) for k in ("H", "B", "D", "E"))
        # d/dx_i of the isotropic part, then d/dx_j of H_i B_j and D_j E_i
        d_iso = -0.5 * (np.einsum("nki,nk->ni", gH, B) + np.einsum("nk,nki->ni", H, gB)
                        + np.einsum("nki,nk->ni", gD, E) + np.einsum("nk,nki->ni", D, gE))
        div_m = (d_iso + np.einsum("nij,nj->ni", gH, B) + H * np.einsum("njj->n", gB)[:, None]
                 + np.einsum("njj->n", gD)[:, None] * E + np.einsum("nj,nij->ni", D, gE))
    else:
        ht, hx = h_fd * fs.time, h_fd * fs.length
        dG = (G(x, t + ht) - G(x, t - ht)) / (2.0 * ht)
        div_m = np.zeros_like(dG)
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[:, j] += hx
            xm[:, j] -= hx
            div_m += (m(xp, t)[:, j, :] - m(xm, t)[:, j, :]) / (2.0 * hx)

    E, B, P = _eval(fs.E, x, t), _eval(fs.B, x, t), _eval(fs.P, x, t)
    dPxB = _cross(_eval(_dt(fs.P), x, t), B) + _cross(P, _eval(_dt(fs.B), x, t))
    F = fs.q(x, t)[:, None] * E + _cross(_eval(fs.J, x, t), B) - dPxB
    return dG, div_m, F


def check_momentum_balance(fs: AnalyticFieldSet, x, t, dt_fd: float | None = None) -> IdentityResult:
    """Residual of ``dG/dt - div m + F`` (momentum balance of the field)."""
    dG, div_m, F = momentum_terms(fs, x, t, dt_fd)
    return _result(dG - div_m + F, dG, div_m, F)


def energy_terms(fs: AnalyticFieldSet, x, t, h_fd: float | None = None):
    """``(de/dt, div Pflux, pi)`` for the field energy, Poynting flux and power."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))

    def e(xx, tt):
        E, B, D, H, P, M = (_eval(getattr(fs, k), xx, tt) for k in ("E", "B", "D", "H", "P", "M"))
        return _dot(P, E) - _dot(B, M) + 0.5 * (_dot(D, E) + _dot(H, B))

    def flux(xx, tt):
        return _cross(_eval(fs.Hfrak, xx, tt), _eval(fs.E, xx, tt))

    E, B, D, H, P, M = (_eval(getattr(fs, k), x, t) for k in ("E", "B", "D", "H", "P", "M"))
    dE, dB, dD, dH, dP, dM = (_eval(_dt(getattr(fs, k)), x, t) for k in ("E", "B", "D", "H", "P", "M"))
    if h_fd is None:
        de = (_dot(dP, E) + _dot(P, dE) - _dot(dB, M) - _dot(B, dM)
              + 0.5 * (_dot(dD, E) + _dot(D, dE) + _dot(dH, B) + _dot(H, dB)))
        gHf, gE = _jacobian(fs.Hfrak, x, t), _jacobian(fs.E, x, t)
        Hf = _eval(fs.Hfrak, x, t)
        # d/dx_i (eps_ijk Hf_j E_k)
        div_flux = (np.einsum("ijk,nji,nk->n", LEVI_CIVITA, gHf, E)
                    + np.einsum("ijk,nj,nki->n", LEVI_CIVITA, Hf, gE))
    else:
        ht, hx = h_fd * fs.time, h_fd * fs.length
        de = (e(x, t + ht) - e(x, t - ht)) / (2.0 * ht)
        div_flux = np.zeros(x.shape[0])
        for i in range(3):
            xp, xm = x.copy(), x.copy()
            xp[:, i] += hx
            xm[:, i] -= hx
            div_flux += (flux(xp, t)[:, i] - flux(xm, t)[:, i]) / (2.0 * hx)
    power = _dot(_eval(fs.Jfr, x, t), E) - _dot(P, dE) + _dot(B, dM)
    return de, div_flux, power


def check_energy_balance(fs: AnalyticFieldSet, x, t, dt_fd: float | None = None) -> IdentityResult:
    """Residual of ``de/dt - div(Hfrak x E) + pi`` (energy balance of the field)."""
    de, div_flux, power = energy_terms(fs, x, t, dt_fd)
    return _result(de - div_flux + power, de, div_flux, power)


def production_gamma(fs: AnalyticFieldSet, x, t, stress: NDArray[np.float64]) -> NDArray[np.float64]:
    """Production term of the internal energy for a given Cauchy stress field.

    ``(sigma_ji - P_j E_i + M_i B_j) dv_i/dx_j + Escr.Jfr - P.dE/dt + B.dM/dt``
    with material time derivatives and ``Escr = E + v x B``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    E, B, P, M, v = (_eval(getattr(fs, k), x, t) for k in ("E", "B", "P", "M", "v"))
    gv = _jacobian(fs.v, x, t)  # [n, i, j] = dv_i/dx_j
    S = np.broadcast_to(stress, gv.shape) - np.einsum("nj,ni->nji", P, E) + np.einsum("ni,nj->nji", M, B)
    work = np.einsum("nji,nij->n", S, gv)
    Escr = E + _cross(v, B)
    matE = _eval(_dt(fs.E), x, t) + np.einsum("nij,nj->ni", _jacobian(fs.E, x, t), v)
    matM = _eval(_dt(fs.M), x, t) + np.einsum("nij,nj->ni", _jacobian(fs.M, x, t), v)
    return work + _dot(Escr, _eval(fs.Jfr, x, t)) - _dot(P, matE) + _dot(B, matM)


def randomized_identity_sweep(n_sets: int = 25, seed: int = DEFAULT_SEED, n_points: int = 20,
                              dt_fd: float | None = None) -> float:
    """Worst relative residual of the three identities over random polynomial sets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sets):
        fs = random_polynomial_set(rng)
        x, t = sample_points(rng, fs, n_points)
        for check in (check_free_current, check_momentum_balance, check_energy_balance):
            res = check(fs, x, t) if check is check_free_current else check(fs, x, t, dt_fd)
            worst = max(worst, res.relative)
    return worst


# --------------------------------------------------------------------------
# Maxwell symmetry


class Duals(NamedTuple):
    """Derivatives of the generating energy in potential-consistent scaling.

    ``eta`` is entropy per reference volume, ``n[j, i]`` the nominal stress,
    ``p`` and ``m`` polarization and magnetization per reference volume.
    """

    eta: float
    n: NDArray[np.float64]
    p: NDArray[np.float64]
    m: NDArray[np.float64]


@dataclass
class SymmetryState:
    T: float
    F: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    E: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    B: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))


ResponseFn = Callable[[SymmetryState], Duals]


def linear_response(mat: LinearMaterial) -> ResponseFn:
    """Duals of the linear model, scaled by ``rho0`` and ``det F``."""

    def fn(s: SymmetryState) -> Duals:
        sample = StateSample.build(np.array(s.T), s.F - np.eye(3), s.E, s.B)
        eta, N, P, M = eval_linear(mat, sample)
        J = float(sample.Jdet)
        return Duals(float(eta) * mat.rho0, N, J * P, J * M)

    return fn


def magnetohyperelastic_response(mat: MagnetoHyperelasticMaterial) -> ResponseFn:
    """Duals of the field-stiffening elastomer (isothermal, no electric coupling)."""

    def fn(s: SymmetryState) -> Duals:
        _, N, M = eval_magnetohyperelastic(mat, s.F, s.B)
        return Duals(0.0, N, np.zeros(3), np.linalg.det(s.F) * M)

    return fn


@dataclass
class SymmetryScales:
    T: float = 1.0
    F: float = 1.0
    E: float = 1e5
    B: float = 1.0


def _perturb(s: SymmetryState, var: str, idx, h: float) -> SymmetryState:
    out = SymmetryState(s.T, s.F.copy(), s.E.copy(), s.B.copy())
    if var == "T":
        out.T += h
    else:
        getattr(out, var)[idx] += h
    return out


def check_maxwell_symmetry(response: ResponseFn, state: SymmetryState, h_fd: float = FD_FIRST,
                           scales: SymmetryScales | None = None) -> dict[str, float]:
    """Cross-derivative relations of the duals by central differences.

    Relations (indices as in ``n[j, i]`` paired with ``F[i, j]``)::

        dn_ji/dT   = -deta/dF_ij      dp_i/dT = deta/dE_i      dm_i/dT = deta/dB_i
        dp_i/dF_kl = -dn_lk/dE_i      dm_i/dF_kl = -dn_lk/dB_i   dm_i/dE_k = dp_k/dB_i

    Each entry is the largest violation relative to the largest entry of
    either side (absolute when both sides vanish); ``"max"`` is the worst.
    """
    sc = scales or SymmetryScales(T=max(abs(state.T), 1.0))
    steps = {"T": h_fd * sc.T, "F": h_fd * sc.F, "E": h_fd * sc.E, "B": h_fd * sc.B}

    def deriv(var: str, idx):
        h = steps[var]
        a = response(_perturb(state, var, idx, h))
        b = response(_perturb(state, var, idx, -h))
        return Duals(*((np.asarray(x1) - np.asarray(x2)) / (2.0 * h) for x1, x2 in zip(a, b)))

    dT = deriv("T", None)
    dF = {(i, j): deriv("F", (i, j)) for i in range(3) for j in range(3)}
    dE = [deriv("E", k) for k in range(3)]
    dB = [deriv("B", k) for k in range(3)]

    pairs: dict[str, tuple[list, list]] = {k: ([], []) for k in ("21", "31", "41", "32", "42", "43")}
    for i in range(3):
        for j in range(3):
            pairs["21"][0].append(dT.n[j, i])
            pairs["21"][1].append(-dF[i, j].eta)
        pairs["31"][0].append(dT.p[i])
        pairs["31"][1].append(dE[i].eta)
        pairs["41"][0].append(dT.m[i])
        pairs["41"][1].append(dB[i].eta)
        for k in range(3):
            for l in range(3):
                pairs["32"][0].append(dF[k, l].p[i])
                pairs["32"][1].append(-dE[i].n[l, k])
                pairs["42"][0].append(dF[k, l].m[i])
                pairs["42"][1].append(-dB[i].n[l, k])
            pairs["43"][0].append(dE[k].m[i])
            pairs["43"][1].append(dB[i].p[k])
    out = {}
    for key, (lhs, rhs) in pairs.items():
        lhs, rhs = np.asarray(lhs, dtype=float), np.asarray(rhs, dtype=float)
        out["c" + key] = _rel(lhs, rhs)
    out["max"] = max(out.values())
    return out


def random_deformation(rng: np.random.Generator, j_range=(0.5, 2.0), spread: float = 0.3) -> NDArray[np.float64]:
    """Deformation gradient with ``det F`` log-uniform in ``j_range``."""
    while True:
        G = np.eye(3) + spread * rng.standard_normal((3, 3))
        d = np.linalg.det(G)
        if d > 0.05:
            break
    J = math.exp(rng.uniform(math.log(j_range[0]), math.log(j_range[1])))
    return G * (J / d) ** (1.0 / 3.0)


def mh_gradient_check(mat: MagnetoHyperelasticMaterial | None = None, n_states: int = 100,
                      seed: int = DEFAULT_SEED, h_fd: float = FD_FIRST) -> float:
    """Worst relative gap between the analytic duals and central FD of the energy.

    Stress ``N[j, i]`` is compared with ``d psi/d F[i, j]`` and magnetization
    with ``-(1/J) d psi/d B``, each relative to its largest entry.
    """
    mat = mat or MagnetoHyperelasticMaterial()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_states):
        F = random_deformation(rng)
        B = rng.uniform(-1.0, 1.0, 3) * math.sqrt(mat.B_s)
        _, N, M = eval_magnetohyperelastic(mat, F, B)
        gF = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                Fp, Fm = F.copy(), F.copy()
                Fp[i, j] += h_fd
                Fm[i, j] -= h_fd
                gF[i, j] = (mh_energy(mat, Fp, B) - mh_energy(mat, Fm, B)) / (2.0 * h_fd)
        gB = np.zeros(3)
        hb = h_fd * math.sqrt(mat.B_s)
        for k in range(3):
            Bp, Bm = B.copy(), B.copy()
            Bp[k] += hb
            Bm[k] -= hb
            gB[k] = (mh_energy(mat, F, Bp) - mh_energy(mat, F, Bm)) / (2.0 * hb)
        worst = max(worst, _rel(N, gF.T), _rel(M, -gB / np.linalg.det(F)))
    return worst


# --------------------------------------------------------------------------
# Second law


def entropy_production_oracle(kappa, sigma, peltier, T, gradT, Escr, Jdet):
    """Production written out from the flux laws: ``kappa |gradT|^2/T^2 + J sigma |Escr|^2 / T``."""
    g2 = np.einsum("...i,...i->...", gradT, gradT)
    e2 = np.einsum("...i,...i->...", Escr, Escr)
    return kappa * g2 / T**2 + Jdet * sigma * e2 / T


def sample_second_law(n: int = 10_000, seed: int = DEFAULT_SEED) -> tuple[float, float]:
    """Minimum production and worst gap to the closed form over random admissible states.

    Each state draws its own ``kappa, sigma >= 0`` (zero with some
    probability), a signed thermoelectric constant, temperature, gradients and
    ``det F``.  The gap is relative to the closed-form value plus the size of
    the cancelling cross terms.
    """
    rng = np.random.default_rng(seed)
    kappa = np.where(rng.random(n) < 0.1, 0.0, rng.uniform(0.0, 500.0, n))
    sigma = np.where(rng.random(n) < 0.1, 0.0, 10.0 ** rng.uniform(-3, 7, n))
    peltier = rng.uniform(-1e-3, 1e-3, n)
    T = rng.uniform(10.0, 2000.0, n)
    gradT = rng.standard_normal((n, 3)) * 10.0 ** rng.uniform(-3, 4, (n, 1))
    Escr = rng.standard_normal((n, 3)) * 10.0 ** rng.uniform(-3, 6, (n, 1))
    Jdet = rng.uniform(0.2, 3.0, n)
    low, gap = math.inf, 0.0
    C = isotropic_voigt(1e9, 0.3)
    for k in range(n):
        mat = LinearMaterial(1000.0, C, kappa=float(kappa[k]), sigma_el=float(sigma[k]), peltier=float(peltier[k]))
        Q, Jfr = eval_fluxes(mat, gradT[k], Escr[k], Jdet[k], T[k])
        prod = float(entropy_production(Q, Jfr, gradT[k], Escr[k], Jdet[k], T[k]))
        oracle = float(entropy_production_oracle(kappa[k], sigma[k], peltier[k], T[k], gradT[k], Escr[k], Jdet[k]))
        cross = abs(sigma[k] * peltier[k] * Jdet[k] * float(gradT[k] @ Escr[k]) / T[k])
        low = min(low, prod)
        gap = max(gap, abs(prod - oracle) / (oracle + cross) if oracle + cross > 0 else abs(prod))
    return low, gap


# --------------------------------------------------------------------------
# Manufactured solutions

# degree-5 rule on triangles (barycentric points, weights summing to one)
_D5_A1, _D5_B1 = 0.059715871789770, 0.470142064105115
_D5_A2, _D5_B2 = 0.797426985353087, 0.101286507323456
_D5_POINTS = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_D5_A1, _D5_B1, _D5_B1], [_D5_B1, _D5_A1, _D5_B1], [_D5_B1, _D5_B1, _D5_A1],
    [_D5_A2, _D5_B2, _D5_B2], [_D5_B2, _D5_A2, _D5_B2], [_D5_B2, _D5_B2, _D5_A2],
])
_D5_WEIGHTS = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def l2_error(nodes, cells, nodal: NDArray[np.float64], exact: Callable) -> float:
    """L2 norm of ``P1(nodal) - exact`` on a triangle mesh with a degree-5 rule.

    ``nodal`` is ``(n_nodes, k)`` and ``exact(points)`` returns ``(n, k)``.
    """
    nodal = nodal.reshape(nodes.shape[0], -1)
    x = nodes[cells]
    area = 0.5 * np.abs((x[:, 1, 0] - x[:, 0, 0]) * (x[:, 2, 1] - x[:, 0, 1])
                        - (x[:, 2, 0] - x[:, 0, 0]) * (x[:, 1, 1] - x[:, 0, 1]))
    pts = np.einsum("qa,cad->cqd", _D5_POINTS, x)
    uh = np.einsum("qa,cak->cqk", _D5_POINTS, nodal[cells])
    ue = np.asarray(exact(pts.reshape(-1, 2)), dtype=np.float64).reshape(uh.shape)
    err2 = np.einsum("c,q,cqk->", area, _D5_WEIGHTS, (uh - ue) ** 2)
    return math.sqrt(err2)


def observed_order(h, err) -> float:
    """Least-squares slope of ``log err`` against ``log h``."""
    return float(np.polyfit(np.log(np.asarray(h)), np.log(np.asarray(err)), 1)[0])


_SH = math.sinh(math.pi)


def _unit_square(n: int, region: int = 0):
    from .mesh import rectangle_mesh

    xs = np.linspace(0.0, 1.0, n + 1)
    return rectangle_mesh(xs, xs, region=lambda c: np.full(c.shape[0], region))


def _harmonic(p):
    x, y = p[:, 0], p[:, 1]
    return np.sin(math.pi * x) * np.sinh(math.pi * y) / _SH


def _harmonic_vec(p):
    x, y = p[:, 0], p[:, 1]
    return np.column_stack([
        np.sin(math.pi * x) * np.sinh(math.pi * y) / _SH,
        np.cos(math.pi * y) * np.cosh(math.pi * x) / math.cosh(math.pi),
        x**2 - y**2,
    ])


def _solve_electrostatic(n: int, linear_exact: bool = False):
    from .em_solver import EMState, PotentialBC, solve_em_step

    mesh = _unit_square(n)
    exact = (lambda p: 1.0 + 2.0 * p[:, 0] - 3.0 * p[:, 1]) if linear_exact else _harmonic
    bn = mesh.boundary_nodes()
    em = EMState.zeros(mesh, 1.0, phi_bcs=[PotentialBC(bn, lambda p, t: exact(p))])
    em.t = em.dt
    solve_em_step(em)
    return mesh, em.phi.coeffs.reshape(-1, 1), lambda p: exact(p)[:, None]


def _solve_magnetostatic(n: int, linear_exact: bool = False):
    from .em_solver import EMState, solve_em_step

    mesh = _unit_square(n)
    if linear_exact:
        exact = lambda p: np.column_stack([p[:, 1], -2.0 * p[:, 0], 0.5 + p[:, 0] + p[:, 1]])
    else:
        exact = _harmonic_vec
    # a long step makes the wave term negligible
    em = EMState.zeros(mesh, 1e3, A_boundary=lambda p, t: exact(p))
    em.t = em.dt
    solve_em_step(em)
    return mesh, em.A.nodal(), exact


def _conduction_material(kappa: float):
    return LinearMaterial(1000.0, isotropic_voigt(1e9, 0.3), kappa=kappa, c_heat=1e-12, T_ref=300.0)


def _solve_conduction(n: int, linear_exact: bool = False):
    """Steady heat conduction ``-kappa lap T = rho0 r`` with Dirichlet data."""
    from .mesh import extract_submesh
    from .tm_solver import NodalBC, TMState, solve_tm_step

    kappa, rho0 = 2.0, 1000.0
    mesh = _unit_square(n, region=2)
    sub = extract_submesh(mesh, 2)
    if linear_exact:
        exact = lambda p: 300.0 + 5.0 * p[:, 0] - 2.0 * p[:, 1]
        source = 0.0
    else:
        amp = 10.0
        exact = lambda p: 300.0 + amp * np.sin(math.pi * p[:, 0]) * np.sin(math.pi * p[:, 1])
        source = lambda p, t: kappa * 2.0 * math.pi**2 * amp * np.sin(math.pi * p[:, 0]) * np.sin(math.pi * p[:, 1]) / rho0
    child = sub.child
    all_nodes = np.arange(child.n_nodes)
    bn = child.boundary_nodes()
    u_bcs = [NodalBC(all_nodes, c, 0.0) for c in range(3)]
    T_bcs = [NodalBC(bn, 0, lambda p, t: exact(p))]
    tm = TMState.at_rest(sub, {2: _conduction_material(kappa)}, 1.0, u_bcs=u_bcs, T_bcs=T_bcs,
                         heat_source=source, include_em=False)
    tm.t = tm.dt
    solve_tm_step(tm)
    return child, tm.T.coeffs.reshape(-1, 1), lambda p: exact(p)[:, None]


def _solve_elastostatic(n: int, linear_exact: bool = False):
    """Plane-strain linear elasticity with a manufactured body force."""
    from .mesh import extract_submesh
    from .tm_solver import NodalBC, TMState, solve_static

    E, nu, rho0 = 1e9, 0.3, 1000.0
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    a = 1e-3
    pi = math.pi
    mesh = _unit_square(n, region=2)
    sub = extract_submesh(mesh, 2)
    if linear_exact:
        G = np.array([[1e-3, 2e-3], [-5e-4, 1e-3]])
        exact = lambda p: np.column_stack([p @ G.T, np.zeros(p.shape[0])])
        force = np.zeros(3)
    else:
        def exact(p):
            x, y = p[:, 0], p[:, 1]
            return a * np.column_stack([np.sin(pi * x) * np.sin(pi * y), np.cos(pi * x) * np.sin(2 * pi * y),
                                        np.zeros_like(x)])

        def force(p, t):
            # f = -div(sigma)/rho0 with sigma = lam tr(eps) I + 2 mu eps
            x, y = p[:, 0], p[:, 1]
            s, c = np.sin, np.cos
            ux_xx = -pi**2 * s(pi * x) * s(pi * y)
            ux_yy = -pi**2 * s(pi * x) * s(pi * y)
            ux_xy = pi**2 * c(pi * x) * c(pi * y)
            uy_xx = -pi**2 * c(pi * x) * s(2 * pi * y)
            uy_yy = -4 * pi**2 * c(pi * x) * s(2 * pi * y)
            uy_xy = -2 * pi**2 * s(pi * x) * c(2 * pi * y)
            div_x = mu * (ux_xx + ux_yy) + (lam + mu) * (ux_xx + uy_xy)
            div_y = mu * (uy_xx + uy_yy) + (lam + mu) * (ux_xy + uy_yy)
            return -a * np.column_stack([div_x, div_y, np.zeros_like(x)]) / rho0

    child = sub.child
    bn = child.boundary_nodes()
    u_bcs = [NodalBC(bn, c, (lambda p, t, c=c: exact(p)[:, c])) for c in range(2)]
    u_bcs.append(NodalBC(np.arange(child.n_nodes), 2, 0.0))
    mat = LinearMaterial(rho0, isotropic_voigt(E, nu), T_ref=300.0)
    tm = TMState.at_rest(sub, {2: mat}, 1.0, u_bcs=u_bcs, body_force=force, include_em=False)
    solve_static(tm, ramp_steps=1)
    return child, tm.u.nodal()[:, :2], lambda p: exact(p)[:, :2]


_PROBLEMS = {
    "electrostatic": _solve_electrostatic,
    "magnetostatic": _solve_magnetostatic,
    "conduction": _solve_conduction,
    "elastostatic": _solve_elastostatic,
}
PROBLEMS = tuple(_PROBLEMS)


def manufactured_errors(problem: str, sizes=(8, 16, 32), linear_exact: bool = False) -> tuple[list[float], list[float]]:
    """Mesh sizes and L2 errors of one manufactured problem on the unit square."""
    if problem not in _PROBLEMS:
        raise ValueError(f"unknown problem '{problem}', expected one of {', '.join(PROBLEMS)}")
    hs, errs = [], []
    for n in sizes:
        mesh, nodal, exact = _PROBLEMS[problem](n, linear_exact)
        hs.append(1.0 / n)
        errs.append(l2_error(mesh.nodes, mesh.cells, nodal, exact))
    return hs, errs


def manufactured_convergence(problem: str, sizes=(8, 16, 32)) -> float:
    """Observed L2 order of ``problem`` over nested uniform refinements."""
    hs, errs = manufactured_errors(problem, sizes)
    return observed_order(hs, errs)


# --------------------------------------------------------------------------
# Bimorph oracle

# finest plane fan mesh used for the bimorph comparison
FINEST_DESK_REFINE = 3

# PZT-5H compliance and charge constant (entered independently of the material library)
_S11, _S12, _D31 = 16.5e-12, -4.78e-12, -265e-12


def bimorph_tip_deflection(V: float, Lp: float = 20e-3, Lb: float = 10e-3, thickness: float = 1e-3,
                           plane_strain: bool = True) -> float:
    """Tip deflection of a series bimorph with a passive extension.

    Two oppositely poled layers of equal thickness carry ``V`` across the
    total ``thickness``; the free curvature is ``3 d31 V / t^2`` and the
    passive extension of length ``Lb`` stays straight::

        delta = kappa (Lp^2/2 + Lp Lb)

    In plane strain the transverse constraint gives ``d31 (1 - s12/s11)``.
    Positive ``V`` is the upper electrode above the lower one.
    """
    d31 = _D31 * (1.0 - _S12 / _S11) if plane_strain else _D31
    kappa = 3.0 * d31 * V / thickness**2
    return kappa * (0.5 * Lp**2 + Lp * Lb)


# --------------------------------------------------------------------------
# Suite


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float
    passed: bool
    detail: str = ""


def _below(name: str, value: float, limit: float, detail: str = "") -> CheckResult:
    return CheckResult(name, float(value), limit, bool(value <= limit), detail)


def _order_result(problem: str, sizes) -> CheckResult:
    order = manufactured_convergence(problem, sizes)
    gap = abs(order - 2.0)
    return CheckResult(f"L2 order {problem} (2 +- limit)", order, 0.2, bool(gap <= 0.2))


def run_suite(quick: bool = False) -> list[CheckResult]:
    """All oracle checks; ``quick`` skips the convergence study and the fan run."""
    rng = np.random.default_rng(DEFAULT_SEED)
    out: list[CheckResult] = []

    pzt = pzt5h()
    st = SymmetryState(T=pzt.T_ref)
    out.append(_below("symmetry pzt5h", check_maxwell_symmetry(linear_response(pzt), st)["max"], 1e-8))
    mh = MagnetoHyperelasticMaterial()
    worst = 0.0
    for _ in range(10):
        ms = SymmetryState(300.0, random_deformation(rng), np.zeros(3), rng.uniform(-1, 1, 3))
        worst = max(worst, check_maxwell_symmetry(magnetohyperelastic_response(mh), ms)["c42"])
    out.append(_below("symmetry magnetohyperelastic", worst, 1e-6))
    out.append(_below("gradient oracle magnetohyperelastic", mh_gradient_check(mh, 20 if quick else 100), 1e-6))

    low, gap = sample_second_law(1000 if quick else 10_000)
    out.append(CheckResult("second law", low, -1e-15, bool(low >= -1e-15), "minimum production"))
    out.append(_below("second law closed form", gap, 1e-12))

    wave = plane_wave_set()
    x, t = sample_points(rng, wave)
    out.append(_below("free current plane wave", check_free_current(wave, x, t).relative, 1e-8))
    out.append(_below("momentum balance plane wave", check_momentum_balance(wave, x, t).relative, 1e-8))
    out.append(_below("energy balance plane wave", check_energy_balance(wave, x, t).relative, 1e-8))
    out.append(_below("identities polynomial", randomized_identity_sweep(5 if quick else 25), 1e-8))
    out.append(_below("identities polynomial FD", randomized_identity_sweep(5 if quick else 25, dt_fd=1e-4), 1e-6))

    if quick:
        return out
    for problem in PROBLEMS:
        out.append(_order_result(problem, (8, 16, 32)))

    from .coupling import solve_static
    from .scenarios_io import build_scenario, observe, setup

    mesh, cfg = build_scenario("piezo_fan", waveform="dc", V=1000.0, refine=FINEST_DESK_REFINE)
    sim = setup(cfg, mesh)
    solve_static(sim.state)
    tip = observe(sim)["u_tip_y"]
    oracle = bimorph_tip_deflection(1000.0)
    out.append(_below("bimorph tip deflection", abs(tip - oracle) / abs(oracle), 0.2,
                      f"fem {tip:.4e} m, oracle {oracle:.4e} m"))
    return out
