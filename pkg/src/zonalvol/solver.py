"""Equality-constrained statics and implicit-Euler dynamics.

The zonal constraints are handled with an augmented Lagrangian. Each outer
iteration minimises

    L(x) = E(x) + p.c(x) + 1/2 sum_j rho_j c_j(x)^2

with a projected Newton method, then updates ``p <- p + rho * c``. ``E``
holds the elastic energy plus either a gravity potential (statics) or the
implicit-Euler inertial term (dynamics).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constraints import ZoneSet, constraint_jacobians, constraint_values, volume_hessians
from .energy import (
    EpidermisParams,
    InvertedElementError,
    MaterialParams,
    Model,
    element_terms,
    penalty_du,
    project_psd,
    scatter_matrix,
    scatter_vector,
)
from .mesh import TetMesh, as_points, signed_volumes

log = logging.getLogger(__name__)

# Relative stationarity floor: below this fraction of the summed force
# magnitudes the gradient is dominated by cancellation error.
ROUNDOFF_FLOOR = 1e-10
# Relative size of merit changes treated as rounding noise.
MERIT_RESOLUTION = 1e-12


class SolverError(RuntimeError):
    """Numerical breakdown (NaN); ``state`` holds the offending iterate."""

    def __init__(self, message: str, state: "SimState | None" = None):
        super().__init__(message)
        self.state = state


class InfeasibleStartError(SolverError):
    """The initial iterate has infinite energy (e.g. an inverted UNH element)."""


@dataclass
class SolverConfig:
    """Solver settings.

    ``grad_tol`` defaults to ``1e-6 * mu * V^(2/3)`` (a force scale) and
    ``penalty_mu0`` to ``10 * max(lambda, mu)``; the per-zone penalty is
    ``penalty_mu0 / V_j`` so that it has the units of a bulk modulus.
    ``hessian="auto"`` takes the exact Newton step when it is a descent
    direction and falls back to the per-element PSD-projected Hessian;
    ``projection`` picks how negative stencil eigenvalues are treated
    (``"abs"`` mirrors them, ``"clamp"`` zeroes them).
    """

    grad_tol: float | None = None
    constraint_tol: float = 1e-8
    max_newton: int = 200
    max_outer: int = 40
    penalty_mu0: float | None = None
    penalty_growth: float = 10.0
    penalty_max_ratio: float = 1e10
    stall_ratio: float = 0.25
    backtrack: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 60
    dt: float = 1.0
    mass_density: float = 1000.0
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    hessian: str = "auto"
    projection: str = "abs"
    linear_solver: str = "auto"
    cg_threshold: int = 60000
    dump_path: str | None = None

    def __post_init__(self):
        if self.grad_tol is not None and self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.constraint_tol <= 0:
            raise ValueError("constraint_tol must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if self.hessian not in ("auto", "projected", "exact"):
            raise ValueError("hessian must be auto, projected or exact")
        if self.projection not in ("abs", "clamp"):
            raise ValueError("projection must be abs or clamp")
        if self.linear_solver not in ("auto", "direct", "cg"):
            raise ValueError("linear_solver must be auto, direct or cg")


@dataclass
class BoundaryConditions:
    """Dirichlet data: ``fixed`` vertices stay where they are in the initial
    state; ``scripted`` vertices are moved to ``targets`` before solving."""

    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scripted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.fixed = np.unique(np.asarray(self.fixed, dtype=np.int64))
        self.scripted = np.asarray(self.scripted, dtype=np.int64).reshape(-1)
        if len(np.intersect1d(self.fixed, self.scripted)):
            raise ValueError("scripted and fixed vertex sets must be disjoint")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 3)
            if len(self.targets) != len(self.scripted):
                raise ValueError("one target per scripted vertex required")

    @property
    def dirichlet(self) -> np.ndarray:
        return np.union1d(self.fixed, self.scripted)

    def apply(self, x) -> np.ndarray:
        p = as_points(x).copy()
        if self.targets is not None and len(self.scripted):
            p[self.scripted] = self.targets
        return p.reshape(-1)

    def free_dofs(self, n_vertices: int) -> np.ndarray:
        mask = np.ones(n_vertices, bool)
        mask[self.dirichlet] = False
        return np.repeat(mask, 3)


@dataclass
class SimState:
    x: np.ndarray
    v: np.ndarray
    multipliers: np.ndarray
    time: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def at_rest(cls, mesh: TetMesh, zones: ZoneSet | None = None) -> "SimState":
        k = len(zones) if zones is not None else 0
        return cls(mesh.reference_positions(), np.zeros(3 * mesh.n_vertices), np.zeros(k))


# ------------------------------------------------------------------ helpers


def lumped_masses(mesh: TetMesh, density: float) -> np.ndarray:
    """Per-vertex masses: each tet gives a quarter of its mass to each vertex."""
    m = np.zeros(mesh.n_vertices)
    np.add.at(m, mesh.tets.ravel(), np.repeat(density * mesh.rest_volumes / 4, 4))
    return m


def default_grad_tol(mesh: TetMesh, materials: MaterialParams) -> float:
    """``1e-6 * mu * V^(2/3)``, a force scale set by the shear modulus.

    The bulk term is left out on purpose: with a large lambda it would
    swamp light external loads. Falls back to lambda, then 1, when mu = 0.
    """
    scale = materials.mu if materials.mu > 0 else (materials.lam if materials.lam > 0 else 1.0)
    return 1e-6 * scale * mesh.total_rest_volume ** (2 / 3)


def _empty_zones(mesh):
    return ZoneSet([], mesh.n_tets)


class _Objective:
    """Energy E(x) = W(x) + 1/2 (x-xh)^T D (x-xh) - f.x over free dofs."""

    def __init__(self, mesh, materials, epidermis, zones, free, *, f_ext=None, inertia=None, x_hat=None):
        self.mesh = mesh
        self.materials = materials
        self.epidermis = epidermis
        self.zones = zones
        self.free = free
        n = 3 * mesh.n_vertices
        self.f_ext = np.zeros(n) if f_ext is None else f_ext
        self.inertia = np.zeros(n) if inertia is None else inertia
        self.x_hat = np.zeros(n) if x_hat is None else x_hat
        vfree = free.reshape(-1, 3).any(axis=1)
        self.active = vfree[mesh.tets].any(axis=1)

    def energy(self, x) -> tuple[float, dict]:
        t = element_terms(self.mesh, x, self.materials, self.epidermis, active=self.active, derivatives=False)
        dx = x - self.x_hat
        inertial = 0.5 * float(dx @ (self.inertia * dx))
        ext = -float(self.f_ext @ x)
        return t.energy + inertial + ext, {"elastic": t.energy, "inertial": inertial, "external": ext}

    def merit(self, x, p, rho) -> float:
        try:
            e, _ = self.energy(x)
        except InvertedElementError:
            return np.inf
        if len(self.zones):
            c = constraint_values(self.mesh, x, self.zones)
            e += float(p @ c + 0.5 * (rho * c) @ c)
        return e

    def gradient(self, x, p):
        """Full-space gradient of E + p.c (no augmentation)."""
        t = element_terms(self.mesh, x, self.materials, self.epidermis, active=self.active, hessian=False)
        n = 3 * self.mesh.n_vertices
        g = scatter_vector(self.mesh.tets[self.active], t.tet_grad, n)
        if len(t.tri_grad):
            g += scatter_vector(self.mesh.surface, t.tri_grad, n)
        g += self.inertia * (x - self.x_hat) - self.f_ext
        if len(self.zones):
            g += constraint_jacobians(self.mesh, x, self.zones).T @ p
        return g

    def reduced_gradient_norm(self, x, p, rho) -> float:
        """Free-dof gradient norm of the augmented Lagrangian."""
        w = p
        if len(self.zones):
            w = p + rho * constraint_values(self.mesh, x, self.zones)
        return float(np.linalg.norm(self.gradient(x, w)[self.free]))

    def newton_system(self, x, p, rho):
        """Free-dof gradient, a Hessian factory ``hess(project)`` and ``J_free``.

        The Hessian omits the ``rho J^T J`` term, which the linear solver
        handles through a bordered system. With ``project`` every element
        stencil is restricted to free dofs and eigen-clamped.
        """
        mesh = self.mesh
        n = 3 * mesh.n_vertices
        f = self.free
        t = element_terms(mesh, x, self.materials, self.epidermis, active=self.active)
        tets = mesh.tets[self.active]
        H_tet = t.tet_hess
        g = scatter_vector(tets, t.tet_grad, n)
        J = None
        if len(self.zones):
            c = constraint_values(mesh, x, self.zones)
            w = p + rho * c
            J = constraint_jacobians(mesh, x, self.zones)
            g += J.T @ w
            w_e = self.zones.membership.T @ w
            # Constraint curvature joins the element stencil before projection;
            # tets without free vertices only touch eliminated dofs.
            H_tet = H_tet + (w_e[:, None, None] * volume_hessians(mesh, x))[self.active]
        H_tri = t.tri_hess
        if len(t.tri_grad):
            g += scatter_vector(mesh.surface, t.tri_grad, n)
        g += self.inertia * (x - self.x_hat) - self.f_ext
        Jf = J.tocsc()[:, f].tocsr() if J is not None else None
        # Magnitude of the summed force terms; sets the roundoff floor on |g|.
        mag = scatter_vector(tets, np.abs(t.tet_grad), n) + np.abs(self.f_ext)
        self.force_scale = float(np.linalg.norm(mag[f]))

        def hess(project: bool, mode: str = "abs"):
            Ht, Hs = H_tet, H_tri
            if project:
                Ht = _project_free(Ht, f, tets, mode)
                if len(t.tri_grad):
                    Hs = _project_free(Hs, f, mesh.surface, mode)
            H = scatter_matrix(tets, Ht, n)
            if len(t.tri_grad):
                H = H + scatter_matrix(mesh.surface, Hs, n)
            H = H + sp.diags(self.inertia)
            return H.tocsr()[f][:, f].tocsc()

        return g[f], hess, Jf


def _project_free(H, free, conn, mode="abs"):
    mask = free.reshape(-1, 3)[conn].reshape(len(conn), -1).astype(float)
    return project_psd(H * mask[:, :, None] * mask[:, None, :], mode)


def _solve_linear(K, Jf, rho, rhs, config: SolverConfig):
    """Solve ``(K + Jf^T diag(rho) Jf) d = rhs``."""
    nf = K.shape[0]
    diag = K.diagonal()
    scale = max(float(np.abs(diag).mean()) if nf else 1.0, 1e-300)
    use_cg = config.linear_solver == "cg" or (config.linear_solver == "auto" and nf > config.cg_threshold)
    if use_cg:
        def mv(v):
            out = K @ v
            if Jf is not None:
                out += Jf.T @ (rho * (Jf @ v))
            return out

        pre = diag.copy()
        if Jf is not None:
            pre += np.asarray(Jf.multiply(Jf).T @ rho).ravel()
        pre = np.where(pre > 0, pre, scale)
        A = spla.LinearOperator((nf, nf), matvec=mv, dtype=float)
        M = spla.LinearOperator((nf, nf), matvec=lambda v: v / pre, dtype=float)
        d, info = spla.cg(A, rhs, M=M, rtol=1e-10, maxiter=10 * nf)
        if info == 0:
            return d
        log.debug("CG did not converge (info=%s); falling back to direct solve", info)

    reg = 1e-10 * scale
    for _ in range(8):
        Kr = K + reg * sp.identity(nf, format="csc")
        try:
            if Jf is None or Jf.shape[0] == 0:
                d = spla.splu(Kr.tocsc()).solve(rhs)
            else:
                k = Jf.shape[0]
                A = sp.bmat([[Kr, Jf.T], [Jf, sp.diags(-1.0 / rho)]], format="csc")
                d = spla.splu(A).solve(np.concatenate([rhs, np.zeros(k)]))[:nf]
            if np.all(np.isfinite(d)):
                return d
        except RuntimeError:
            pass
        reg *= 100
    raise np.linalg.LinAlgError("linear solve failed")


def _newton(obj: _Objective, x, p, rho, config, grad_tol, stats, min_iters=0):
    """Minimise the augmented Lagrangian at fixed (p, rho). Returns (x, ok).

    ``min_iters`` forces that many steps before the stationarity test; after
    a multiplier update the old iterate can already pass the test while the
    constraint has not moved.
    """
    merit = obj.merit(x, p, rho)
    if not np.isfinite(merit):
        raise InfeasibleStartError(f"initial iterate has non-finite merit ({merit})")
    history = [merit]
    for it in range(config.max_newton + 1):
        g, hess, Jf = obj.newton_system(x, p, rho)
        gnorm = float(np.linalg.norm(g))
        if np.isnan(gnorm):
            raise SolverError("NaN in gradient")
        stats["last_grad"] = gnorm
        if it >= min_iters and gnorm <= max(grad_tol, ROUNDOFF_FLOOR * obj.force_scale):
            stats["merit_history"].append(history)
            return x, True
        if it == config.max_newton:
            break
        d = None
        if config.hessian != "projected":
            try:
                d = _solve_linear(hess(False), Jf, rho, -g, config)
            except np.linalg.LinAlgError:
                d = None
            # Exact Newton steps must be clearly downhill; otherwise project.
            if d is not None and config.hessian == "auto" and not g @ d < -1e-3 * gnorm * np.linalg.norm(d):
                d = None
        if d is None:
            d = _solve_linear(hess(True, config.projection), Jf, rho, -g, config)
            stats["projected_steps"] = stats.get("projected_steps", 0) + 1
        slope = float(g @ d)
        if not slope < 0:
            d, slope = -g, -gnorm**2
        step = np.zeros_like(x)
        resolution = MERIT_RESOLUTION * max(abs(merit), 1.0)
        if -slope <= resolution:
            # The predicted decrease is below what the merit can resolve, so
            # Armijo cannot tell good steps from bad. Take the full step when
            # it lowers the gradient and leaves the merit unchanged to
            # working precision; otherwise the iterate is stationary as far
            # as double precision can tell.
            step[obj.free] = d
            trial = obj.merit(x + step, p, rho)
            stats["newton_iters"] += 1
            if trial <= merit + resolution and obj.reduced_gradient_norm(x + step, p, rho) < gnorm:
                x = x + step
                merit = trial
                history.append(merit)
                continue
            log.debug("stalled at merit resolution, |g|=%.3e", gnorm)
            break

        alpha = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            step[obj.free] = alpha * d
            trial = obj.merit(x + step, p, rho)
            if np.isnan(trial):
                raise SolverError("NaN in merit function")
            if trial <= merit + config.armijo * alpha * slope:
                accepted = True
                break
            alpha *= config.backtrack
        if not accepted:
            # Rounding floor: accept the full step only if it does not raise the merit.
            step[obj.free] = d
            trial = obj.merit(x + step, p, rho)
            if trial <= merit:
                accepted = True
        stats["newton_iters"] += 1
        if not accepted:
            log.debug("line search failed at |g|=%.3e", gnorm)
            break
        x = x + step
        merit = trial
        history.append(merit)
    stats["merit_history"].append(history)
    return x, False


def _minimize(obj: _Objective, x0, p0, config: SolverConfig, grad_tol: float, penalty0: float, time_=0.0):
    zones = obj.zones
    k = len(zones)
    stats = {"newton_iters": 0, "outer_iters": 0, "merit_history": []}
    x = x0.copy()
    p = np.array(p0, dtype=float) if k else np.zeros(0)
    V0 = zones.rest_volumes if k else np.zeros(0)
    rho = penalty0 / V0 if k else np.zeros(0)
    rho_cap = rho * config.penalty_max_ratio
    prev_feas = np.inf
    ok = False
    feas = 0.0
    for outer in range(max(config.max_outer, 1)):
        stats["outer_iters"] = outer + 1
        try:
            x, inner_ok = _newton(obj, x, p, rho, config, grad_tol, stats, min_iters=1 if outer else 0)
        except SolverError as exc:
            exc.state = SimState(x, np.zeros_like(x), p, time_, dict(stats))
            if config.dump_path:
                np.savez(config.dump_path, x=x, p=p, rho=rho)
            raise
        if not k:
            ok = inner_ok
            break
        c = constraint_values(obj.mesh, x, zones)
        feas = float(np.max(np.abs(c) / V0))
        p = p + rho * c
        if inner_ok and feas <= config.constraint_tol:
            ok = True
            break
        if feas > config.stall_ratio * prev_feas:
            rho = np.minimum(rho * config.penalty_growth, rho_cap)
        prev_feas = feas
    stats["converged"] = ok
    stats["feasibility"] = feas
    stats["stationarity"] = stats.get("last_grad", 0.0)
    stats["penalty"] = rho
    if not ok:
        log.warning("solver did not converge (feasibility %.3e, |g| %.3e)", feas, stats["stationarity"])
    return x, p, stats


def _penalty0(materials, config):
    if config.penalty_mu0 is not None:
        return config.penalty_mu0
    return 10.0 * max(materials.lam, materials.mu, 1e-12)


def solve_static(
    mesh: TetMesh,
    materials: MaterialParams,
    zones: ZoneSet | None,
    bc: BoundaryConditions,
    config: SolverConfig,
    x_init=None,
    *,
    epidermis: EpidermisParams | None = None,
    multipliers=None,
) -> SimState:
    """Minimise elastic + gravity potential subject to the zonal constraints.

    Dirichlet dofs are eliminated. Convergence information is returned in
    ``state.diagnostics`` (``converged``, ``newton_iters``, ``outer_iters``,
    ``stationarity``, ``feasibility``).
    """
    zones = zones if zones is not None else _empty_zones(mesh)
    x0 = bc.apply(mesh.reference_positions() if x_init is None else np.asarray(x_init, float).reshape(-1))
    free = bc.free_dofs(mesh.n_vertices)
    masses = lumped_masses(mesh, config.mass_density)
    f_ext = (masses[:, None] * np.asarray(config.gravity)[None, :]).reshape(-1)
    obj = _Objective(mesh, materials, epidermis, zones, free, f_ext=f_ext)
    grad_tol = config.grad_tol or default_grad_tol(mesh, materials)
    p0 = np.zeros(len(zones)) if multipliers is None else multipliers
    t0 = time.perf_counter()
    x, p, stats = _minimize(obj, x0, p0, config, grad_tol, _penalty0(materials, config))
    stats["wall_ms"] = 1e3 * (time.perf_counter() - t0)
    return SimState(x, np.zeros_like(x), p, 0.0, stats)


def step_implicit_euler(
    state: SimState,
    mesh: TetMesh,
    materials: MaterialParams,
    zones: ZoneSet | None,
    bc: BoundaryConditions,
    config: SolverConfig,
    *,
    epidermis: EpidermisParams | None = None,
) -> SimState:
    """One backward-Euler step of size ``config.dt`` under gravity.

    Minimises ``1/(2h^2) |x - x_hat|_M^2 + W(x)`` with
    ``x_hat = x_n + h v_n + h^2 g``; multipliers are warm-started from
    ``state``.
    """
    zones = zones if zones is not None else _empty_zones(mesh)
    h = config.dt
    masses = np.repeat(lumped_masses(mesh, config.mass_density), 3)
    g = np.tile(np.asarray(config.gravity, dtype=float), mesh.n_vertices)
    x_hat = state.x + h * state.v + h * h * g
    free = bc.free_dofs(mesh.n_vertices)
    obj = _Objective(mesh, materials, epidermis, zones, free, inertia=masses / h**2, x_hat=x_hat)
    x0 = state.x.copy()
    x0[free] = x_hat[free]
    x0 = bc.apply(x0)
    p0 = state.multipliers if len(state.multipliers) == len(zones) else np.zeros(len(zones))
    if not np.isfinite(obj.merit(x0, p0, np.zeros(len(zones)))):
        x0 = bc.apply(state.x)
    grad_tol = config.grad_tol or default_grad_tol(mesh, materials)
    t0 = time.perf_counter()
    x, p, stats = _minimize(obj, x0, p0, config, grad_tol, _penalty0(materials, config), state.time + h)
    stats["wall_ms"] = 1e3 * (time.perf_counter() - t0)
    v = (x - state.x) / h
    return SimState(x, v, p, state.time + h, stats)


def compute_element_pressures(state: SimState, mesh: TetMesh, materials: MaterialParams, zones: ZoneSet | None):
    """Per-element pressure: summed zone multipliers plus the local volumetric stress.

    The local term is ``lambda * U'(J)`` for the deviatoric model and the
    volumetric part ``lambda log(J) / J`` of the UNH Cauchy stress otherwise.
    """
    J = signed_volumes(mesh.tets, state.x) / mesh.rest_volumes
    if materials.model is Model.UNH:
        with np.errstate(invalid="ignore", divide="ignore"):
            local = materials.lam * np.log(J) / J
    else:
        local = materials.lam * penalty_du(J, materials.beta)
    if zones is not None and len(zones):
        local = local + zones.membership.T @ np.asarray(state.multipliers, dtype=float)
    return local


def kkt_residuals(
    state: SimState,
    mesh: TetMesh,
    materials: MaterialParams,
    zones: ZoneSet | None,
    bc: BoundaryConditions,
    config: SolverConfig,
    *,
    epidermis: EpidermisParams | None = None,
):
    """Static KKT residuals ``(|grad W - f + J^T p|_free, c_j / V_j)``."""
    zones = zones if zones is not None else _empty_zones(mesh)
    free = bc.free_dofs(mesh.n_vertices)
    masses = lumped_masses(mesh, config.mass_density)
    f_ext = (masses[:, None] * np.asarray(config.gravity)[None, :]).reshape(-1)
    obj = _Objective(mesh, materials, epidermis, zones, free, f_ext=f_ext)
    p = np.asarray(state.multipliers, dtype=float) if len(zones) else np.zeros(0)
    g = obj.gradient(np.asarray(state.x, float), p)
    stat = float(np.linalg.norm(g[free]))
    feas = constraint_values(mesh, state.x, zones) / zones.rest_volumes if len(zones) else np.zeros(0)
    return stat, feas


def gravitational_potential(mesh: TetMesh, x, config: SolverConfig, reference_height: float | None = None) -> float:
    """``-sum m_i g.(x_i - x_ref)`` with heights measured from the lowest rest vertex."""
    masses = lumped_masses(mesh, config.mass_density)
    g = np.asarray(config.gravity, dtype=float)
    p = as_points(x)
    gn = np.linalg.norm(g)
    if gn == 0:
        return 0.0
    ghat = g / gn
    base = (mesh.vertices @ ghat).max() if reference_height is None else reference_height
    return float(-(masses * gn) @ (p @ ghat - base))


def kinetic_energy(mesh: TetMesh, v, config: SolverConfig) -> float:
    masses = np.repeat(lumped_masses(mesh, config.mass_density), 3)
    v = np.asarray(v, dtype=float).reshape(-1)
    return 0.5 * float(v @ (masses * v))


__all__ = [
    "BoundaryConditions",
    "SimState",
    "SolverConfig",
    "SolverError",
    "InfeasibleStartError",
    "compute_element_pressures",
    "gravitational_potential",
    "kinetic_energy",
    "kkt_residuals",
    "lumped_masses",
    "solve_static",
    "step_implicit_euler",
]
