"""Material response: tensor conversions, the linear coupled model, the
magneto-hyperelastic model, thermoelectric fluxes and stress composition.

Every evaluator broadcasts over leading batch axes, so the same code serves
single material points and whole arrays of quadrature points.  Index
conventions follow the nominal stress ``N[j, i]`` pairing with
``d/dF[i, j]`` of the stored energy, and the rank-4 stiffness is kept on
displacement-gradient pairs (``C[j, i, k, l]``), without forcing symmetries
beyond the ones present in the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from numpy.typing import NDArray

from . import EPS0, MU0

# Voigt order 11, 22, 33, 23, 13, 12.
VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
_VOIGT_INDEX = np.empty((3, 3), dtype=int)
for _I, (_a, _b) in enumerate(VOIGT_PAIRS):
    _VOIGT_INDEX[_a, _b] = _VOIGT_INDEX[_b, _a] = _I

LEVI_CIVITA = np.zeros((3, 3, 3))
LEVI_CIVITA[0, 1, 2] = LEVI_CIVITA[1, 2, 0] = LEVI_CIVITA[2, 0, 1] = 1.0
LEVI_CIVITA[0, 2, 1] = LEVI_CIVITA[2, 1, 0] = LEVI_CIVITA[1, 0, 2] = -1.0

I3 = np.eye(3)


class MaterialError(ValueError):
    """Invalid material data or an inadmissible state."""


# --------------------------------------------------------------------------
# Tensor conversions


def voigt_to_full(C_voigt: NDArray[np.float64], rtol: float = 1e-12) -> NDArray[np.float64]:
    """Rank-4 stiffness from a symmetric 6x6 Voigt matrix.

    Minor symmetries are imposed, so contracting with a symmetric strain
    reproduces the Voigt product with engineering shear strains.
    """
    Cv = np.asarray(C_voigt, dtype=np.float64)
    if Cv.shape != (6, 6):
        raise MaterialError(f"Voigt stiffness must be 6x6, got {Cv.shape}")
    if not np.allclose(Cv, Cv.T, rtol=0.0, atol=rtol * max(np.abs(Cv).max(), 1e-300)):
        raise MaterialError("Voigt stiffness must be symmetric")
    return Cv[_VOIGT_INDEX[:, :, None, None], _VOIGT_INDEX[None, None, :, :]].copy()


def full_to_voigt(C: NDArray[np.float64]) -> NDArray[np.float64]:
    out = np.empty((6, 6))
    for I, (i, j) in enumerate(VOIGT_PAIRS):
        for J, (k, l) in enumerate(VOIGT_PAIRS):
            out[I, J] = C[i, j, k, l]
    return out


def compliance_to_stiffness(S_voigt: NDArray[np.float64]) -> NDArray[np.float64]:
    """Voigt stiffness ``C = (S^T)^-1`` from a Voigt compliance matrix."""
    S = np.asarray(S_voigt, dtype=np.float64)
    if S.shape != (6, 6):
        raise MaterialError(f"compliance must be 6x6, got {S.shape}")
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e14:
        raise MaterialError(f"compliance matrix is singular (condition number {cond:.3e})")
    return np.linalg.inv(S.T)


def transversely_isotropic_compliance(S11, S12, S13, S33, S44, S66) -> NDArray[np.float64]:
    """Voigt compliance of a material with the symmetry axis along x3."""
    return np.array(
        [
            [S11, S12, S13, 0, 0, 0],
            [S12, S11, S13, 0, 0, 0],
            [S13, S13, S33, 0, 0, 0],
            [0, 0, 0, S44, 0, 0],
            [0, 0, 0, 0, S44, 0],
            [0, 0, 0, 0, 0, S66],
        ],
        dtype=np.float64,
    )


def isotropic_voigt(E: float, nu: float) -> NDArray[np.float64]:
    """Isotropic Voigt stiffness with ``G = E/(2(1+nu))``, ``lam = (E-2G)G/(3G-E)``."""
    G = E / (2.0 * (1.0 + nu))
    lam = (E - 2.0 * G) * G / (3.0 * G - E)
    return lame_voigt(lam, G)


def lame_voigt(lam: float, mu: float) -> NDArray[np.float64]:
    C = np.zeros((6, 6))
    C[:3, :3] = lam
    C[np.arange(3), np.arange(3)] = lam + 2.0 * mu
    C[np.arange(3, 6), np.arange(3, 6)] = mu
    return C


def voigt_d_to_full(d_voigt: NDArray[np.float64]) -> NDArray[np.float64]:
    """Piezoelectric strain constants ``d[m, k, l]`` from the 3x6 Voigt layout.

    Shear entries are engineering-strain coefficients, so the tensor
    components are half of them.
    """
    d = np.asarray(d_voigt, dtype=np.float64)
    if d.shape != (3, 6):
        raise MaterialError(f"piezoelectric matrix must be 3x6, got {d.shape}")
    factor = np.array([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])
    return (d * factor)[:, _VOIGT_INDEX]


def piezo_d_to_T(C: NDArray[np.float64], d_voigt: NDArray[np.float64]) -> NDArray[np.float64]:
    """Piezoelectric stress coupling ``Tt[m, i, j] = C[i, j, k, l] d[m, k, l]``."""
    return np.einsum("ijkl,mkl->mij", C, voigt_d_to_full(d_voigt))


# --------------------------------------------------------------------------
# Material bundles


@dataclass
class LinearMaterial:
    """Parameters of the linear thermo-electro-magneto-elastic model (SI units).

    ``peltier`` is the thermoelectric constant and ``c_heat`` the specific heat
    capacity.  ``mu_mag_inv`` defaults to the vacuum value and ``chi_mag`` to
    zero, which describes a non-magnetic material.
    """

    rho0: float
    C: NDArray[np.float64]
    alpha: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    Ttilde: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3, 3)))
    Stilde: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3, 3)))
    Rtilde: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    chi_el: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    chi_mag: NDArray[np.float64] = field(default_factory=lambda: np.zeros((3, 3)))
    mu_mag_inv: NDArray[np.float64] = field(default_factory=lambda: np.eye(3) / MU0)
    c_heat: float = 1.0
    kappa: float = 0.0
    sigma_el: float = 0.0
    peltier: float = 0.0
    h_conv: float = 0.0
    T_ref: float = 300.0
    C_symmetric: bool = False
    name: str = ""

    thermal = True

    def __post_init__(self) -> None:
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.shape == (6, 6):
            self.C = voigt_to_full(self.C)
            self.C_symmetric = True
        if self.C.shape != (3, 3, 3, 3):
            raise MaterialError("stiffness must be 6x6 Voigt or 3x3x3x3")
        for name, shape in (("alpha", (3, 3)), ("Ttilde", (3, 3, 3)), ("Stilde", (3, 3, 3)), ("Rtilde", (3, 3)),
                            ("chi_el", (3, 3)), ("chi_mag", (3, 3)), ("mu_mag_inv", (3, 3))):
            val = np.asarray(getattr(self, name), dtype=np.float64)
            if val.shape != shape:
                raise MaterialError(f"{name} must have shape {shape}, got {val.shape}")
            setattr(self, name, val)
        if self.rho0 <= 0:
            raise MaterialError("rho0 must be positive")
        if self.T_ref <= 0:
            raise MaterialError("T_ref must be positive")
        if self.kappa < 0 or self.sigma_el < 0:
            raise MaterialError("kappa and sigma_el must be nonnegative")
        if self.h_conv < 0:
            raise MaterialError("h_conv must be nonnegative")
        self.chi_mag_eff = self.mu_mag_inv @ self.chi_mag


@dataclass
class MagnetoHyperelasticMaterial:
    """Field-stiffening neo-Hookean elastomer.

    Stored energy per reference volume::

        psi = mu/4 (1 + alpha_tilde tanh(I4/B_s)) ((1+n)(I1b-3) + (1-n)(I2b-3))
              + q I4 + r I6 + kappa_vol/2 (J-1)^2

    with isochoric invariants ``I1b = J^(-2/3) I1``, ``I2b = J^(-4/3) I2``,
    ``I4 = B.B`` and ``I6 = |C B|^2``.  ``kappa_vol`` defaults to ``100 mu``.
    """

    mu_shear: float = 260e3
    B_s: float = 1.0
    alpha_tilde: float = 0.3
    n: float = 0.3
    q_coef: float = 1.0 / MU0
    r_coef: float = 1.0 / MU0
    kappa_vol: float | None = None
    rho0: float = 1000.0
    name: str = ""

    thermal = False

    def __post_init__(self) -> None:
        if self.kappa_vol is None:
            self.kappa_vol = 100.0 * self.mu_shear
        if self.mu_shear <= 0 or self.B_s <= 0 or self.kappa_vol < 0:
            raise MaterialError("mu_shear, B_s must be positive and kappa_vol nonnegative")
        if self.rho0 <= 0:
            raise MaterialError("rho0 must be positive")


# --------------------------------------------------------------------------
# Linear model


class StateSample(NamedTuple):
    """Primitive variables at one or more material points (batched on leading axes)."""

    T: NDArray[np.float64]
    gradu: NDArray[np.float64]
    F: NDArray[np.float64]
    Jdet: NDArray[np.float64]
    E: NDArray[np.float64]
    B: NDArray[np.float64]
    Escr: NDArray[np.float64]
    gradT: NDArray[np.float64]
    v: NDArray[np.float64]

    @classmethod
    def build(cls, T, gradu=None, E=None, B=None, gradT=None, v=None) -> StateSample:
        T = np.asarray(T, dtype=np.float64)
        batch = T.shape
        z3 = np.zeros(batch + (3,))
        gradu = np.zeros(batch + (3, 3)) if gradu is None else np.asarray(gradu, dtype=np.float64)
        E = z3 if E is None else np.asarray(E, dtype=np.float64)
        B = z3 if B is None else np.asarray(B, dtype=np.float64)
        gradT = z3 if gradT is None else np.asarray(gradT, dtype=np.float64)
        v = z3 if v is None else np.asarray(v, dtype=np.float64)
        F = gradu + I3
        J = np.linalg.det(F)
        return cls(T, gradu, F, J, E, B, E + np.cross(v, B), gradT, v)


def _check_state(T, J) -> None:
    if np.any(np.asarray(T) <= 0):
        raise MaterialError("temperature must be positive")
    if np.any(np.asarray(J) <= 0):
        raise MaterialError("det F must be positive")


def _contract_C(C, strain):
    # C[j, i, k, l] strain[k, l] -> [..., j, i]
    return (strain.reshape(-1, 9) @ C.reshape(9, 9).T).reshape(strain.shape)


def eval_linear(mat: LinearMaterial, s: StateSample):
    """Entropy, nominal stress, polarization and magnetization of the linear model.

    Returns ``(eta, N, P, M)`` with ``N[..., j, i]``.  The temperature and
    displacement-gradient offsets are formed before any product so the
    reference state evaluates to exact zeros.
    """
    _check_state(s.T, s.Jdet)
    theta = s.T - mat.T_ref
    Jinv = 1.0 / s.Jdet
    two_m = 2.0 - Jinv
    v0 = 1.0 / mat.rho0
    strain = s.gradu - mat.alpha * theta[..., None, None]  # -alpha (T - Tref) + du/dX
    eta = (
        mat.c_heat * np.log(s.T / mat.T_ref)
        + v0 * np.einsum("lkij,ij,...kl->...", mat.C, mat.alpha, s.gradu)
        - v0 * np.einsum("kij,ij,...k->...", mat.Ttilde, mat.alpha, s.E)
        - v0 * two_m * np.einsum("kij,ij,...k->...", mat.Stilde, mat.alpha, s.B)
    )
    N = (
        _contract_C(mat.C, strain)
        - np.einsum("kij,...k->...ji", mat.Ttilde, s.E)
        - two_m[..., None, None] * np.einsum("kij,...k->...ji", mat.Stilde, s.B)
    )
    P = (
        Jinv[..., None] * np.einsum("ikl,...kl->...i", mat.Ttilde, strain)
        + EPS0 * np.einsum("ik,...k->...i", mat.chi_el, s.E)
        + two_m[..., None] * np.einsum("ki,...k->...i", mat.Rtilde, s.B)
    )
    M = (
        Jinv[..., None] * np.einsum("ikl,...kl->...i", mat.Stilde, strain)
        + np.einsum("ik,...k->...i", mat.Rtilde, s.E)
        + two_m[..., None] * np.einsum("ik,...k->...i", mat.chi_mag_eff, s.B)
    )
    return eta, N, P, M


def linear_entropy(mat: LinearMaterial, T, gradu, E, B, Jdet):
    """Entropy of the linear model alone (needed for the previous time level)."""
    v0 = 1.0 / mat.rho0
    return (
        mat.c_heat * np.log(T / mat.T_ref)
        + v0 * np.einsum("lkij,ij,...kl->...", mat.C, mat.alpha, gradu)
        - v0 * np.einsum("kij,ij,...k->...", mat.Ttilde, mat.alpha, E)
        - v0 * (2.0 - 1.0 / Jdet) * np.einsum("kij,ij,...k->...", mat.Stilde, mat.alpha, B)
    )


# --------------------------------------------------------------------------
# Magneto-hyperelastic model


def _mh_parts(mat: MagnetoHyperelasticMaterial, F, B):
    F = np.asarray(F, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise MaterialError("det F must be positive")
    C = np.einsum("...ki,...kj->...ij", F, F)
    I1 = np.einsum("...ii->...", C)
    I2 = 0.5 * (I1**2 - np.einsum("...ij,...ji->...", C, C))
    I4 = np.einsum("...i,...i->...", B, B)
    CB = np.einsum("...ij,...j->...i", C, B)
    I6 = np.einsum("...i,...i->...", CB, CB)
    return F, B, J, C, I1, I2, I4, CB, I6


def eval_magnetohyperelastic(mat: MagnetoHyperelasticMaterial, F, B):
    """Stored energy ``psi``, nominal stress ``N`` and magnetization ``M``.

    ``N[..., j, i] = d psi / d F[..., i, j]`` and ``M = -(1/J) d psi / d B``.
    """
    F, B, J, C, I1, I2, I4, CB, I6 = _mh_parts(mat, F, B)
    mu, a, n = mat.mu_shear, mat.alpha_tilde, mat.n
    J23 = J ** (-2.0 / 3.0)
    J43 = J ** (-4.0 / 3.0)
    I1b = J23 * I1
    I2b = J43 * I2
    th = np.tanh(I4 / mat.B_s)
    g = 1.0 + a * th
    h = (1.0 + n) * (I1b - 3.0) + (1.0 - n) * (I2b - 3.0)
    psi = 0.25 * mu * g * h + mat.q_coef * I4 + mat.r_coef * I6 + 0.5 * mat.kappa_vol * (J - 1.0) ** 2

    Finv_T = np.swapaxes(np.linalg.inv(F), -1, -2)
    FC = np.einsum("...ik,...kj->...ij", F, C)
    dI1b = J23[..., None, None] * (2.0 * F - (2.0 / 3.0) * I1[..., None, None] * Finv_T)
    dI2b = J43[..., None, None] * (2.0 * (I1[..., None, None] * F - FC) - (4.0 / 3.0) * I2[..., None, None] * Finv_T)
    FB = np.einsum("...ij,...j->...i", F, B)
    FCB = np.einsum("...ij,...j->...i", F, CB)
    dI6 = 2.0 * (FB[..., :, None] * CB[..., None, :] + FCB[..., :, None] * B[..., None, :])
    dpsi_dF = (
        (0.25 * mu * g)[..., None, None] * ((1.0 + n) * dI1b + (1.0 - n) * dI2b)
        + mat.r_coef * dI6
        + (mat.kappa_vol * (J - 1.0) * J)[..., None, None] * Finv_T
    )
    N = np.swapaxes(dpsi_dF, -1, -2)

    sech2 = 1.0 - th**2
    CCB = np.einsum("...ij,...j->...i", C, CB)
    dpsi_dB = (
        (0.25 * mu * h * a * sech2 / mat.B_s * 2.0)[..., None] * B
        + 2.0 * mat.q_coef * B
        + 2.0 * mat.r_coef * CCB
    )
    M = -dpsi_dB / J[..., None]
    return psi, N, M


def mh_energy(mat: MagnetoHyperelasticMaterial, F, B):
    """Stored energy alone, used by finite-difference oracles."""
    F, B, J, C, I1, I2, I4, CB, I6 = _mh_parts(mat, F, B)
    I1b = J ** (-2.0 / 3.0) * I1
    I2b = J ** (-4.0 / 3.0) * I2
    g = 1.0 + mat.alpha_tilde * np.tanh(I4 / mat.B_s)
    h = (1.0 + mat.n) * (I1b - 3.0) + (1.0 - mat.n) * (I2b - 3.0)
    return 0.25 * mat.mu_shear * g * h + mat.q_coef * I4 + mat.r_coef * I6 + 0.5 * mat.kappa_vol * (J - 1.0) ** 2


# --------------------------------------------------------------------------
# Fluxes and stress


def eval_fluxes(mat: LinearMaterial, gradT, Escr, Jdet, T):
    """Referential heat flux ``Q`` and free current ``Jfr``.

    ``Q = -kappa gradT + sigma peltier T J Escr`` and
    ``Jfr = sigma peltier gradT + sigma Escr``.
    """
    gradT = np.asarray(gradT)
    Escr = np.asarray(Escr)
    T = np.asarray(T)
    Jdet = np.asarray(Jdet)
    sp = mat.sigma_el * mat.peltier
    Q = -mat.kappa * gradT + (sp * T * Jdet)[..., None] * Escr
    Jfr = sp * gradT + mat.sigma_el * Escr
    return Q, Jfr


def entropy_production(Q, Jfr, gradT, Escr, Jdet, T):
    """Right-hand side of the entropy balance, ``-Q.gradT/T^2 + (J/T) Escr.Jfr``."""
    return -np.einsum("...i,...i->...", Q, gradT) / T**2 + Jdet / T * np.einsum("...i,...i->...", Escr, Jfr)


def cauchy_stress(N, F, Jdet, P, E, M, B):
    """``sigma[j, i] = F[j, k] N[k, i] / J + P[j] E[i] - M[i] B[j]``."""
    Jdet = np.asarray(Jdet)
    return (
        np.matmul(F, N) / Jdet[..., None, None]
        + P[..., :, None] * E[..., None, :]
        - B[..., :, None] * M[..., None, :]
    )


# --------------------------------------------------------------------------
# Tabulated materials


def pzt5h(T_ref: float = 300.0, name: str = "PZT-5H") -> LinearMaterial:
    """PZT-5H poled along x3 (thermoelectric constant and conductivity zero)."""
    S = transversely_isotropic_compliance(16.5e-12, -4.78e-12, -8.45e-12, 20.7e-12, 43.5e-12, 42.6e-12)
    Cv = compliance_to_stiffness(S)
    Cv = 0.5 * (Cv + Cv.T)
    C = voigt_to_full(Cv)
    d = np.zeros((3, 6))
    d[2, 0] = d[2, 1] = -265e-12
    d[2, 2] = 585e-12
    d[0, 4] = d[1, 3] = 730e-12
    return LinearMaterial(
        rho0=7500.0,
        C=C,
        C_symmetric=True,
        alpha=np.diag([6e-6, 6e-6, -4e-6]),
        Ttilde=piezo_d_to_T(C, d),
        chi_el=np.diag([3130.0, 3130.0, 3400.0]) - np.eye(3),
        c_heat=350.0,
        kappa=1.1,
        T_ref=T_ref,
        name=name,
    )


def epoxy(T_ref: float = 300.0, name: str = "epoxy") -> LinearMaterial:
    """Isotropic epoxy, E = 30 GPa, nu = 0.4."""
    return LinearMaterial(
        rho0=2500.0,
        C=isotropic_voigt(30e9, 0.4),
        alpha=15e-6 * np.eye(3),
        c_heat=800.0,
        kappa=1.3,
        T_ref=T_ref,
        name=name,
    )


# --------------------------------------------------------------------------
# Material frames


def axes_to_rotation(axis3, axis1=(1.0, 0.0, 0.0)) -> NDArray[np.float64]:
    """Rotation whose columns are the material axes in global coordinates.

    ``axis3`` is the material 3-axis (poling direction); ``axis1`` is made
    orthogonal to it and the 2-axis completes a right-handed frame.
    """
    e3 = np.asarray(axis3, dtype=np.float64)
    e3 = e3 / np.linalg.norm(e3)
    e1 = np.asarray(axis1, dtype=np.float64)
    e1 = e1 - (e1 @ e3) * e3
    if np.linalg.norm(e1) < 1e-12:
        raise MaterialError("material 1-axis is parallel to the 3-axis")
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(e3, e1)
    return np.column_stack([e1, e2, e3])


def rotate_material(mat: LinearMaterial, R: NDArray[np.float64], name: str | None = None) -> LinearMaterial:
    """Express a linear material given in its own axes in global axes ``x = R X``."""
    R = np.asarray(R, dtype=np.float64)
    if not np.allclose(R @ R.T, I3, atol=1e-12) or np.linalg.det(R) <= 0:
        raise MaterialError("rotation must be proper orthogonal")
    r2 = lambda A: np.einsum("ai,bj,ij->ab", R, R, A)
    r3 = lambda A: np.einsum("ai,bj,ck,ijk->abc", R, R, R, A)
    return replace(
        mat,
        C=np.einsum("ai,bj,ck,dl,ijkl->abcd", R, R, R, R, mat.C),
        alpha=r2(mat.alpha),
        Ttilde=r3(mat.Ttilde),
        Stilde=r3(mat.Stilde),
        Rtilde=r2(mat.Rtilde),
        chi_el=r2(mat.chi_el),
        chi_mag=r2(mat.chi_mag),
        mu_mag_inv=r2(mat.mu_mag_inv),
        name=mat.name if name is None else name,
    )
