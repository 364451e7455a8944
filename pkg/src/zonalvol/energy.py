"""Energy densities, their derivatives, and global assembly.

Matrices are flattened column-major: ``vec(F)[3*j + i] = F[i, j]``, so a
9-vector is the three columns of ``F`` stacked. All density routines are
batched over a leading element axis; the single-matrix wrappers return
``(value, gradient, hessian)`` with the gradient shaped like the input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import TetMesh, area_ratio, deformation_gradients, reduced_deformation_gradients


class InvertedElementError(ValueError):
    """An energy with a log barrier was evaluated on an inverted element."""


class Model(str, enum.Enum):
    UNH = "UNH"
    CNH_DEVIATORIC = "CNH_deviatoric"


@dataclass(frozen=True)
class MaterialParams:
    """Volumetric material.

    ``lam`` is the first Lame parameter for UNH; for the deviatoric model it
    scales the local compression penalty ``U(J; beta)``.
    """

    mu: float
    lam: float
    beta: float = 1.0
    epsilon: float = 0.1
    model: Model = Model.CNH_DEVIATORIC

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")

    @classmethod
    def from_young_poisson(cls, E: float, nu: float, **kw) -> "MaterialParams":
        lam, mu = lame_from_young_poisson(E, nu)
        return cls(mu=mu, lam=lam, **kw)


@dataclass(frozen=True)
class EpidermisParams:
    lambda_e: float
    gamma: float = 1.0

    def __post_init__(self):
        if self.lambda_e < 0 or self.gamma < 0:
            raise ValueError("epidermis parameters must be >= 0")


@dataclass
class EnergyReport:
    deviatoric: float = 0.0
    penalty: float = 0.0
    epidermis: float = 0.0
    inertial: float = 0.0

    @property
    def total(self) -> float:
        return self.deviatoric + self.penalty + self.epidermis + self.inertial


def lame_from_young_poisson(E: float, nu: float) -> tuple[float, float]:
    """Return ``(lambda, mu)`` for Young's modulus ``E`` and Poisson ratio ``nu``."""
    if E <= 0:
        raise ValueError("Young's modulus must be positive")
    if nu >= 0.5:
        raise ValueError("incompressible limit; use constraints")
    if nu <= -1:
        raise ValueError("Poisson ratio must exceed -1")
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    return lam, mu


# ------------------------------------------------------------- F invariants


def vec(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F)
    return np.swapaxes(F, -1, -2).reshape(F.shape[:-2] + (F.shape[-1] * F.shape[-2],))


def unvec(v: np.ndarray, rows: int = 3) -> np.ndarray:
    v = np.asarray(v)
    cols = v.shape[-1] // rows
    return np.swapaxes(v.reshape(v.shape[:-1] + (cols, rows)), -1, -2)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices ``[v]x`` for (..., 3) input."""
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def det_gradient(F: np.ndarray) -> np.ndarray:
    """vec of dJ/dF (the cofactor matrix); (..., 9)."""
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    return np.concatenate([np.cross(f1, f2), np.cross(f2, f0), np.cross(f0, f1)], axis=-1)


def det_hessian(F: np.ndarray) -> np.ndarray:
    """d^2J/dF^2 in vec ordering; (..., 9, 9), linear in F."""
    f0, f1, f2 = F[..., :, 0], F[..., :, 1], F[..., :, 2]
    S0, S1, S2 = skew(f0), skew(f1), skew(f2)
    H = np.zeros(F.shape[:-2] + (9, 9))
    H[..., 0:3, 3:6] = -S2
    H[..., 0:3, 6:9] = S1
    H[..., 3:6, 6:9] = -S0
    H[..., 3:6, 0:3] = S2
    H[..., 6:9, 0:3] = -S1
    H[..., 6:9, 3:6] = S0
    return H


def _invariant_chain(F, fI, fJ, fII, fIJ, fJJ):
    """Gradient and Hessian of ``f(I_C, J)`` from its partial derivatives."""
    gI = 2.0 * vec(F)
    gJ = det_gradient(F)
    grad = fI[..., None] * gI + fJ[..., None] * gJ
    outer = lambda a, b: a[..., :, None] * b[..., None, :]  # noqa: E731
    H = (
        fII[..., None, None] * outer(gI, gI)
        + fIJ[..., None, None] * (outer(gI, gJ) + outer(gJ, gI))
        + fJJ[..., None, None] * outer(gJ, gJ)
        + 2.0 * fI[..., None, None] * np.eye(9)
        + fJ[..., None, None] * det_hessian(F)
    )
    return grad, H


# --------------------------------------------------------------- densities


def unh_density(F, lam, mu, derivatives=True):
    """Batched UNH density; raises ``InvertedElementError`` when det F <= 0."""
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise InvertedElementError("UNH undefined for inverted element")
    IC = np.einsum("...ij,...ij->...", F, F)
    lJ = np.log(J)
    psi = 0.5 * mu * (IC - 3) - mu * lJ + 0.5 * lam * lJ**2
    if not derivatives:
        return psi
    z = np.zeros_like(J)
    fI = np.full_like(J, 0.5 * mu)
    fJ = (lam * lJ - mu) / J
    fJJ = (mu + lam - lam * lJ) / J**2
    g, H = _invariant_chain(F, fI, fJ, z, z, fJJ)
    return psi, g, H


def psi_unh(F, lam, mu):
    psi, g, H = unh_density(np.asarray(F, dtype=float)[None], lam, mu)
    return float(psi[0]), unvec(g[0]), H[0]


def alpha_tilde(J, epsilon=0.1):
    """Extended ``J^(-1/3)`` and its first two derivatives.

    Below ``epsilon`` the power law is replaced by its second-order Taylor
    expansion about ``epsilon``, which is C2 at the joint and finite for
    every real J.
    """
    J = np.asarray(J, dtype=float)
    Jc = np.maximum(J, epsilon)
    a = np.where(J > epsilon, Jc ** (-1 / 3), 0.0)
    da = np.where(J > epsilon, -(1 / 3) * Jc ** (-4 / 3), 0.0)
    dda = np.where(J > epsilon, (4 / 9) * Jc ** (-7 / 3), 0.0)
    d = J - epsilon
    low = J <= epsilon
    e13, e43, e73 = epsilon ** (-1 / 3), epsilon ** (-4 / 3), epsilon ** (-7 / 3)
    a = np.where(low, e13 - e43 * d / 3 + 2 / 9 * e73 * d**2, a)
    da = np.where(low, -e43 / 3 + 4 / 9 * e73 * d, da)
    dda = np.where(low, 4 / 9 * e73, dda)
    if a.ndim == 0:
        return float(a), float(da), float(dda)
    return a, da, dda


def dev_nh_density(F, mu, epsilon=0.1, derivatives=True):
    """Batched deviatoric neo-Hookean density ``mu/2 (alpha~(J)^2 I_C - 3)``."""
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    IC = np.einsum("...ij,...ij->...", F, F)
    a, da, dda = alpha_tilde(J, epsilon)
    a, da, dda = np.asarray(a), np.asarray(da), np.asarray(dda)
    psi = 0.5 * mu * (a**2 * IC - 3)
    if not derivatives:
        return psi
    z = np.zeros_like(J)
    fI = 0.5 * mu * a**2
    fJ = mu * a * da * IC
    fIJ = mu * a * da
    fJJ = mu * (da**2 + a * dda) * IC
    g, H = _invariant_chain(F, fI, fJ, z, fIJ, fJJ)
    return psi, g, H


def psi_dev_nh(F, mu, epsilon=0.1):
    psi, g, H = dev_nh_density(np.asarray(F, dtype=float)[None], mu, epsilon)
    return float(psi[0]), unvec(g[0]), H[0]


def penalty_u(J, beta=1.0):
    """Compression penalty ``U(J; beta)`` with ``U(1)=U'(1)=0``, ``U''(1)=1``."""
    d = np.asarray(J, dtype=float) - 1.0
    return d**2 * (beta * d**2 + 6) / 12


def penalty_du(J, beta=1.0):
    d = np.asarray(J, dtype=float) - 1.0
    return d * (beta * d**2 + 3) / 3


def penalty_d2u(J, beta=1.0):
    d = np.asarray(J, dtype=float) - 1.0
    return beta * d**2 + 1


def penalty_un(J, beta=1.0, n: int = 1):
    """Order-n penalty ``U_n``; returns ``(U, U', U'')``. ``n = 1`` equals :func:`penalty_u`."""
    if int(n) != n or n < 1:
        raise ValueError("penalty order n must be a positive integer")
    d = np.asarray(J, dtype=float) - 1.0
    k = (2 * n + 1) * (2 * n + 2)
    u = d**2 * (beta * d ** (2 * n) + k / 2) / k
    du = d * (beta * d ** (2 * n) + (2 * n + 1)) / (2 * n + 1)
    d2u = beta * d ** (2 * n) + 1
    return u, du, d2u


def penalty_density(F, lam, beta, derivatives=True):
    """Batched ``lam * U(det F; beta)`` with derivatives w.r.t. F."""
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    psi = lam * penalty_u(J, beta)
    if not derivatives:
        return psi
    z = np.zeros_like(J)
    g, H = _invariant_chain(F, z, lam * penalty_du(J, beta), z, z, lam * penalty_d2u(J, beta))
    return psi, g, H


def epidermis_density(Ft, gamma, lambda_e, derivatives=True):
    """Batched surface energy ``lambda_e U(J~; gamma)`` on 3x2 matrices.

    ``J~`` is the unsigned area ratio ``|f0 x f1|``. Derivatives use the
    6-vector ``vec(Ft) = (f0, f1)``.
    """
    Ft = np.asarray(Ft, dtype=float)
    a, b = Ft[..., :, 0], Ft[..., :, 1]
    n = np.cross(a, b)
    s = np.linalg.norm(n, axis=-1)
    psi = lambda_e * penalty_u(s, gamma)
    if not derivatives:
        return psi
    dU = lambda_e * penalty_du(s, gamma)
    d2U = lambda_e * penalty_d2u(s, gamma)
    # q = |n|^2; s = sqrt(q)
    gq = 2.0 * np.concatenate([np.cross(b, n), np.cross(n, a)], axis=-1)
    N = np.concatenate([-skew(b), skew(a)], axis=-1)  # dn/d(a,b), (..., 3, 6)
    Hq = 2.0 * (np.swapaxes(N, -1, -2) @ N)
    Sn = skew(n)
    Hq[..., 0:3, 3:6] -= 2.0 * Sn
    Hq[..., 3:6, 0:3] += 2.0 * Sn
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(s > 0, s, 1.0)
        gs = gq / (2 * safe[..., None])
        Hs = Hq / (2 * safe[..., None, None]) - gq[..., :, None] * gq[..., None, :] / (4 * safe[..., None, None] ** 3)
    g = dU[..., None] * gs
    H = d2U[..., None, None] * gs[..., :, None] * gs[..., None, :] + dU[..., None, None] * Hs
    return psi, g, H


def psi_epidermis(Ft, gamma, lambda_e):
    psi, g, H = epidermis_density(np.asarray(Ft, dtype=float)[None], gamma, lambda_e)
    return float(psi[0]), unvec(g[0], 3), H[0]


# ---------------------------------------------------------------- assembly


def project_psd(H: np.ndarray, mode: str = "clamp") -> np.ndarray:
    """Make a batch of symmetric matrices positive semi-definite.

    ``mode="clamp"`` zeroes negative eigenvalues; ``mode="abs"`` replaces
    them by their magnitude, which keeps curvature information in the
    flipped directions.
    """
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    w, V = np.linalg.eigh(H)
    if mode == "abs":
        w = np.abs(w)
    elif mode == "clamp":
        w = np.maximum(w, 0.0)
    else:
        raise ValueError(f"unknown projection mode {mode!r}")
    return (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)


def _shape_gradient_operator(Dinv: np.ndarray) -> np.ndarray:
    """Per-element ``d vec(F) / d x`` for ``F = Ds Dinv``; (m, 3c, 3(c+1))."""
    G = np.concatenate([-Dinv.sum(axis=1, keepdims=True), Dinv], axis=1)  # (m, c+1, c)
    eye = np.eye(3)
    B = np.einsum("maj,ik->mjiak", G, eye)
    m, c1, c = G.shape
    return B.reshape(m, 3 * c, 3 * c1)


def _element_dofs(conn: np.ndarray) -> np.ndarray:
    return (3 * conn[:, :, None] + np.arange(3)).reshape(len(conn), -1)


def scatter_vector(conn, values, n_dof):
    dofs = _element_dofs(conn)
    return np.bincount(dofs.ravel(), weights=values.ravel(), minlength=n_dof)


def scatter_matrix(conn, blocks, n_dof) -> sp.csr_matrix:
    dofs = _element_dofs(conn)
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(n_dof, n_dof))


@dataclass
class ElementTerms:
    """Per-element assembled pieces before scattering (used by the solver)."""

    energy: float
    report: EnergyReport
    tet_grad: np.ndarray  # (m, 12)
    tet_hess: np.ndarray | None  # (m, 12, 12), unprojected
    tri_grad: np.ndarray  # (k, 9)
    tri_hess: np.ndarray | None  # (k, 9, 9)


def element_terms(
    mesh: TetMesh,
    x,
    materials: MaterialParams,
    epidermis: EpidermisParams | None = None,
    *,
    active: np.ndarray | None = None,
    hessian: bool = True,
    derivatives: bool = True,
) -> ElementTerms:
    """Volume-weighted element energies, gradients and Hessians in vertex space.

    ``active`` selects which tets contribute (the solver drops tets with no
    free vertex since their energy is a constant).
    """
    idx = np.arange(mesh.n_tets) if active is None else np.flatnonzero(active)
    F = deformation_gradients(mesh, x)[idx]
    V0 = mesh.rest_volumes[idx]
    rep = EnergyReport()
    m = len(idx)
    if materials.model is Model.UNH:
        out = unh_density(F, materials.lam, materials.mu, derivatives)
        parts = [(out, "deviatoric")]
    else:
        parts = [
            (dev_nh_density(F, materials.mu, materials.epsilon, derivatives), "deviatoric"),
            (penalty_density(F, materials.lam, materials.beta, derivatives), "penalty"),
        ]
    gF = np.zeros((m, 9))
    HF = np.zeros((m, 9, 9)) if hessian else None
    for out, name in parts:
        psi = out[0] if derivatives else out
        setattr(rep, name, getattr(rep, name) + float(V0 @ psi))
        if derivatives:
            gF += out[1]
            if hessian:
                HF += out[2]

    tri_g = np.zeros((0, 9))
    tri_H = np.zeros((0, 9, 9)) if hessian else None
    if epidermis is not None and epidermis.lambda_e > 0 and len(mesh.surface):
        Ft = reduced_deformation_gradients(mesh, x)
        A0 = mesh.surface_rest_areas
        out = epidermis_density(Ft, epidermis.gamma, epidermis.lambda_e, derivatives)
        psi = out[0] if derivatives else out
        rep.epidermis = float(A0 @ psi)
        if derivatives:
            Bt = _shape_gradient_operator(mesh.surface_rest_inverse)
            tri_g = A0[:, None] * (out[1][:, None, :] @ Bt)[:, 0]
            if hessian:
                tri_H = A0[:, None, None] * (np.swapaxes(Bt, 1, 2) @ out[2] @ Bt)

    tet_g = np.zeros((m, 12))
    tet_H = None
    if derivatives:
        B = _shape_gradient_operator(mesh.rest_inverse_shape[idx])
        tet_g = V0[:, None] * (gF[:, None, :] @ B)[:, 0]
        if hessian:
            tet_H = V0[:, None, None] * (np.swapaxes(B, 1, 2) @ HF @ B)
    return ElementTerms(rep.total, rep, tet_g, tet_H, tri_g, tri_H)


def energy(mesh, x, materials, epidermis=None, *, active=None) -> EnergyReport:
    return element_terms(mesh, x, materials, epidermis, active=active, derivatives=False, hessian=False).report


def assemble(
    mesh: TetMesh,
    x,
    materials: MaterialParams,
    epidermis: EpidermisParams | None = None,
    *,
    psd_project: bool = False,
    active: np.ndarray | None = None,
):
    """Total elastic energy, gradient (3n) and sparse symmetric Hessian.

    Returns ``(report, gradient, hessian, psd_projected)``. With
    ``psd_project`` each element stencil is eigen-clamped before scatter.
    """
    n_dof = 3 * mesh.n_vertices
    t = element_terms(mesh, x, materials, epidermis, active=active)
    tets = mesh.tets if active is None else mesh.tets[np.asarray(active, bool)]
    tet_H, tri_H = t.tet_hess, t.tri_hess
    if psd_project:
        tet_H = project_psd(tet_H)
        if len(tri_H):
            tri_H = project_psd(tri_H)
    g = scatter_vector(tets, t.tet_grad, n_dof)
    H = scatter_matrix(tets, tet_H, n_dof)
    if len(t.tri_grad):
        g += scatter_vector(mesh.surface, t.tri_grad, n_dof)
        H = H + scatter_matrix(mesh.surface, tri_H, n_dof)
    return t.report, g, H.tocsr(), psd_project
