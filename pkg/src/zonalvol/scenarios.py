"""Scenario configuration, the frame loop, metric output and built-in experiments.

A scenario is stored as INI-style text with the sections ``scenario``,
``mesh``, ``material``, ``epidermis``, ``zones``, ``bc``, ``solver`` and
``output``, plus one ``script.<name>`` section per scripted vertex set::

    [scenario]
    name = stretch_cnh
    mode = static
    frames = 14

    [mesh]
    generator = grid
    shape = 8 8 8

    [bc]
    fixed = xmin

    [script.pull]
    vertices = xmax
    motion = translate
    keyframes =
        0 0 0 0
        14 7 0 0

Keyframe times are in seconds; static frame ``f`` is evaluated at
``t = f * dt``. Translate rows are ``t dx dy dz``, rotate rows ``t angle``
(radians, about ``axis`` through ``center``) and scale rows ``t factor``
(along ``direction`` about ``center``). Keyframes are interpolated
piecewise-linearly and held after the last one.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constraints import ZoneSet, constraint_values, read_zones
from .energy import EpidermisParams, MaterialParams, energy
from .mesh import MeshError, TetMesh, _atomic_write, export_surface, import_mesh, make_grid, make_two_tet, signed_volumes
from .solver import (
    BoundaryConditions,
    InfeasibleStartError,
    SimState,
    SolverConfig,
    SolverError,
    compute_element_pressures,
    kinetic_energy,
    solve_static,
    step_implicit_euler,
)
from .zoning import global_zone, k_ring_zones, per_element_zones, read_weights, zones_from_surface_weights

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

FRAME_COLUMNS = (
    "frame",
    "total_volume",
    "volume_error_pct",
    "elastic_energy",
    "kinetic_energy",
    "max_constraint_residual",
    "min_element_J",
    "newton_iters",
    "outer_iters",
    "wall_ms",
)


class ConfigError(ValueError):
    """Malformed scenario configuration; carries the offending line when known."""

    def __init__(self, message: str, line: int = 0, path: str | None = None):
        self.line = line
        prefix = (f"{path}:" if path else "") + (f"line {line}: " if line else "")
        super().__init__(prefix + message)


# ------------------------------------------------------------------- types


@dataclass
class MeshSpec:
    generator: str = "grid"  # grid | two_tet | file
    shape: tuple[int, int, int] = (4, 4, 4)
    size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    path: str | None = None


@dataclass
class ZoneSpec:
    kind: str = "none"  # none | global | k_ring | per_element | weights | file
    k: int = 1
    path: str | None = None
    threshold: float = 0.5


@dataclass
class Script:
    """Piecewise-linear motion of a vertex set."""

    name: str
    vertices: str
    motion: str = "translate"  # translate | rotate | scale
    keyframes: np.ndarray = field(default_factory=lambda: np.zeros((1, 4)))
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    center: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.motion not in ("translate", "rotate", "scale"):
            raise ValueError(f"unknown motion {self.motion!r}")
        width = 4 if self.motion == "translate" else 2
        kf = np.atleast_2d(np.asarray(self.keyframes, dtype=float))
        if kf.shape[1] != width or len(kf) == 0:
            raise ValueError(f"{self.motion} keyframes need {width} columns")
        if np.any(np.diff(kf[:, 0]) <= 0):
            raise ValueError("keyframe times must be strictly increasing")
        self.keyframes = kf

    def value(self, t: float) -> np.ndarray:
        kf = self.keyframes
        return np.array([np.interp(t, kf[:, 0], kf[:, c]) for c in range(1, kf.shape[1])])

    def positions(self, rest: np.ndarray, t: float) -> np.ndarray:
        """Target positions of the selected rest vertices at time ``t``."""
        val = self.value(t)
        c = rest.mean(axis=0) if self.center is None else np.asarray(self.center, dtype=float)
        if self.motion == "translate":
            return rest + val
        if self.motion == "rotate":
            a = np.asarray(self.axis, dtype=float)
            a = a / np.linalg.norm(a)
            th = float(val[0])
            K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
            R = np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * K @ K
            return (rest - c) @ R.T + c
        d = np.asarray(self.direction, dtype=float)
        d = d / np.linalg.norm(d)
        s = (rest - c) @ d
        return rest + (float(val[0]) - 1.0) * s[:, None] * d


@dataclass
class OutputPlan:
    csv: str = "metrics.csv"
    surface_every: int = 0
    pressures: bool = False


@dataclass
class Scenario:
    name: str
    mesh: MeshSpec = field(default_factory=MeshSpec)
    material: MaterialParams = field(default_factory=lambda: MaterialParams(mu=1.0, lam=10.0))
    epidermis: EpidermisParams | None = None
    zones: ZoneSpec = field(default_factory=ZoneSpec)
    fixed: str = ""
    scripts: list[Script] = field(default_factory=list)
    mode: str = "static"  # static | dynamic
    frames: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputPlan = field(default_factory=OutputPlan)
    description: str = ""
    perturbation: float = 0.0
    seed: int = 0
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in ("static", "dynamic"):
            raise ValueError("mode must be static or dynamic")
        if self.frames < 0:
            raise ValueError("frames must be non-negative")


@dataclass
class FrameMetrics:
    frame: int
    total_volume: float
    volume_error_pct: float
    elastic_energy: float
    kinetic_energy: float
    max_constraint_residual: float
    min_element_J: float
    newton_iters: int
    outer_iters: int
    wall_ms: float

    def row(self) -> list[str]:
        return [repr(getattr(self, c)) if isinstance(getattr(self, c), float) else str(getattr(self, c)) for c in FRAME_COLUMNS]


@dataclass
class RunResult:
    scenario: Scenario
    mesh: TetMesh
    zones: ZoneSet | None
    metrics: list[FrameMetrics]
    state: SimState
    converged: bool
    error: str | None = None
    pressures: np.ndarray | None = None
    states: list[np.ndarray] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.converged and self.error is None else EXIT_SOLVER


# --------------------------------------------------------------- selectors


def select_vertices(mesh: TetMesh, selector: str) -> np.ndarray:
    """Vertex indices matching a selector expression.

    Terms are joined with ``;`` and unioned: ``xmin``/``xmax``/``ymin``/...
    (rest-bounding-box faces), ``all``, ``indices: i j k`` and
    ``box: x0 y0 z0 x1 y1 z1``.
    """
    X = mesh.vertices
    lo, hi = X.min(axis=0), X.max(axis=0)
    tol = 1e-9 * max(float(np.max(hi - lo)), 1e-300)
    out = np.zeros(len(X), bool)
    for term in (t.strip() for t in selector.split(";")):
        if not term:
            continue
        if term == "all":
            out[:] = True
        elif len(term) == 4 and term[0] in "xyz" and term[1:] in ("min", "max"):
            a = "xyz".index(term[0])
            ref = lo[a] if term[1:] == "min" else hi[a]
            out |= np.abs(X[:, a] - ref) <= tol
        elif term.startswith("indices:"):
            try:
                idx = np.array([int(s) for s in term[8:].split()], dtype=np.int64)
            except ValueError:
                raise ValueError(f"bad vertex index in {term!r}") from None
            if len(idx) and (idx.min() < 0 or idx.max() >= len(X)):
                raise ValueError(f"vertex index out of range in {term!r}")
            out[idx] = True
        elif term.startswith("box:"):
            b = np.array([float(s) for s in term[4:].split()])
            if b.shape != (6,):
                raise ValueError("box needs six numbers")
            out |= np.all((X >= b[:3] - tol) & (X <= b[3:] + tol), axis=1)
        else:
            raise ValueError(f"unknown vertex selector {term!r}")
    return np.flatnonzero(out)


# ------------------------------------------------------------ config text


def _floats(s: str, n: int | None = None) -> tuple[float, ...]:
    vals = tuple(float(v) for v in s.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _line_of(text: str, section: str, key: str | None = None) -> int:
    """Best-effort line number of ``key`` in ``[section]`` for error messages."""
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None and not raw[:1].isspace():
            name = s.split("=", 1)[0].split(":", 1)[0].strip().lower()
            if name == key.lower():
                return n
    return 0


def parse_scenario(text: str, path: str | None = None, base_dir: str | None = None) -> Scenario:
    """Parse scenario text; errors carry the line of the offending entry."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=path or "<scenario>")
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else 0
        raise ConfigError(f"cannot parse {exc.errors[0][1].strip() if exc.errors else 'input'!r}", line, path) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", 0) or 0, path) from None

    known = {"scenario", "mesh", "material", "epidermis", "zones", "bc", "solver", "output"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("script."):
            raise ConfigError(f"unknown section [{sec}]", _line_of(text, sec), path)

    current = {"sec": "scenario", "key": None}

    def get(sec, key, default=None, conv=str):
        current["sec"], current["key"] = sec, key
        if not cp.has_option(sec, key):
            return default
        return conv(cp.get(sec, key).strip())

    def boolean(s):
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {s!r}")

    try:
        if not cp.has_section("scenario"):
            raise ConfigError("missing [scenario] section", 0, path)
        name = get("scenario", "name", Path(path).stem if path else "scenario")
        mode = get("scenario", "mode", "static")
        frames = get("scenario", "frames", 1, int)
        description = get("scenario", "description", "")
        perturbation = get("scenario", "perturbation", 0.0, float)
        seed = get("scenario", "seed", 0, int)

        gen = get("mesh", "generator", "grid")
        if gen not in ("grid", "two_tet", "file"):
            raise ValueError(f"unknown mesh generator {gen!r}")
        mesh = MeshSpec(
            generator=gen,
            shape=tuple(int(v) for v in get("mesh", "shape", (4, 4, 4), lambda s: _floats(s, 3))),
            size=get("mesh", "size", (1.0, 1.0, 1.0), lambda s: _floats(s, 3)),
            path=get("mesh", "path", None),
        )
        if gen == "file" and not mesh.path:
            current["key"] = "path"
            raise ValueError("mesh generator 'file' needs a path")

        model = get("material", "model", "CNH_deviatoric")
        if cp.has_option("material", "young"):
            young = get("material", "young", conv=float)
            poisson = get("material", "poisson", conv=float)
            if poisson is None:
                raise ValueError("young requires poisson")
            material = MaterialParams.from_young_poisson(
                young,
                poisson,
                beta=get("material", "beta", 1.0, float),
                epsilon=get("material", "epsilon", 0.1, float),
                model=model,
            )
        else:
            material = MaterialParams(
                mu=get("material", "mu", 1.0, float),
                lam=get("material", "lam", 10.0, float),
                beta=get("material", "beta", 1.0, float),
                epsilon=get("material", "epsilon", 0.1, float),
                model=model,
            )

        epidermis = None
        if get("epidermis", "enabled", False, boolean):
            epidermis = EpidermisParams(get("epidermis", "lambda_e", 10.0, float), get("epidermis", "gamma", 1.0, float))

        kind = get("zones", "kind", "none")
        if kind not in ("none", "global", "k_ring", "per_element", "weights", "file"):
            raise ValueError(f"unknown zone kind {kind!r}")
        zones = ZoneSpec(kind, get("zones", "k", 1, int), get("zones", "path", None), get("zones", "threshold", 0.5, float))
        if kind in ("weights", "file") and not zones.path:
            raise ValueError(f"zone kind {kind!r} needs a path")

        fixed = get("bc", "fixed", "")
        scripts = []
        for sec in cp.sections():
            if not sec.startswith("script."):
                continue
            motion = get(sec, "motion", "translate")
            raw = get(sec, "keyframes", None)
            if raw is None:
                raise ValueError("script needs keyframes")
            rows = [_floats(r) for r in raw.replace(";", "\n").splitlines() if r.strip()]
            if len({len(r) for r in rows}) != 1:
                raise ValueError("keyframe rows have inconsistent lengths")
            center = get(sec, "center", None, lambda s: _floats(s, 3))
            axis = get(sec, "axis", (0.0, 0.0, 1.0), lambda s: _floats(s, 3))
            direction = get(sec, "direction", (1.0, 0.0, 0.0), lambda s: _floats(s, 3))
            vertices = get(sec, "vertices", "")
            # Keyframe validation errors point at the keyframes entry.
            current["key"] = "motion" if motion not in ("translate", "rotate", "scale") else "keyframes"
            scripts.append(Script(sec[7:], vertices, motion, np.array(rows), axis, direction, center))

        skw = {}
        for f in fields(SolverConfig):
            if not cp.has_option("solver", f.name):
                continue
            if f.name == "gravity":
                skw[f.name] = get("solver", f.name, conv=lambda s: _floats(s, 3))
            elif f.name in ("hessian", "linear_solver", "projection", "dump_path"):
                skw[f.name] = get("solver", f.name)
            elif f.name in ("max_newton", "max_outer", "max_backtracks", "cg_threshold"):
                skw[f.name] = get("solver", f.name, conv=int)
            else:
                skw[f.name] = get("solver", f.name, conv=float)
        if cp.has_section("solver"):
            unknown = set(cp.options("solver")) - {f.name for f in fields(SolverConfig)}
            if unknown:
                current["sec"], current["key"] = "solver", sorted(unknown)[0]
                raise ValueError(f"unknown solver option {sorted(unknown)[0]!r}")
        solver = SolverConfig(**skw)

        output = OutputPlan(
            csv=get("output", "csv", "metrics.csv"),
            surface_every=get("output", "surface_every", 0, int),
            pressures=get("output", "pressures", False, boolean),
        )
        return Scenario(
            name=name,
            mesh=mesh,
            material=material,
            epidermis=epidermis,
            zones=zones,
            fixed=fixed,
            scripts=scripts,
            mode=mode,
            frames=frames,
            solver=solver,
            output=output,
            description=description,
            perturbation=perturbation,
            seed=seed,
            base_dir=base_dir if base_dir is not None else (str(Path(path).parent) if path else "."),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        line = _line_of(text, current["sec"], current["key"]) or _line_of(text, current["sec"])
        raise ConfigError(str(exc), line, path) from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc.strerror}", 0, str(path)) from None
    return parse_scenario(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_scenario(sc: Scenario) -> str:
    """Serialise a scenario to config text that :func:`parse_scenario` reads back."""
    out = io.StringIO()

    def section(name, items):
        out.write(f"[{name}]\n")
        for k, v in items:
            if v is None:
                continue
            if isinstance(v, str) and "\n" in v:
                out.write(f"{k} =\n" + "".join(f"    {ln}\n" for ln in v.splitlines()))
            else:
                out.write(f"{k} = {_fmt(v)}\n")
        out.write("\n")

    section(
        "scenario",
        [
            ("name", sc.name),
            ("description", sc.description or None),
            ("mode", sc.mode),
            ("frames", sc.frames),
            ("perturbation", sc.perturbation if sc.perturbation else None),
            ("seed", sc.seed if sc.seed else None),
        ],
    )
    m = sc.mesh
    section(
        "mesh",
        [("generator", m.generator)]
        + ([("shape", m.shape), ("size", tuple(float(v) for v in m.size))] if m.generator == "grid" else [])
        + ([("path", m.path)] if m.generator == "file" else []),
    )
    mat = sc.material
    section(
        "material",
        [("model", mat.model.value), ("mu", float(mat.mu)), ("lam", float(mat.lam)), ("beta", float(mat.beta)), ("epsilon", float(mat.epsilon))],
    )
    if sc.epidermis is not None:
        section("epidermis", [("enabled", "true"), ("lambda_e", float(sc.epidermis.lambda_e)), ("gamma", float(sc.epidermis.gamma))])
    z = sc.zones
    section(
        "zones",
        [("kind", z.kind)]
        + ([("k", z.k)] if z.kind == "k_ring" else [])
        + ([("path", z.path)] if z.kind in ("weights", "file") else [])
        + ([("threshold", float(z.threshold))] if z.kind == "weights" else []),
    )
    section("bc", [("fixed", sc.fixed)])
    for s in sc.scripts:
        rows = "\n".join(" ".join(_fmt(float(v)) for v in r) for r in s.keyframes)
        items = [("vertices", s.vertices), ("motion", s.motion)]
        if s.motion == "rotate":
            items.append(("axis", tuple(float(v) for v in s.axis)))
        if s.motion == "scale":
            items.append(("direction", tuple(float(v) for v in s.direction)))
        if s.center is not None:
            items.append(("center", tuple(float(v) for v in s.center)))
        items.append(("keyframes", rows + "\n" if "\n" not in rows else rows))
        section(f"script.{s.name}", items)
    default = SolverConfig()
    items = []
    for f in fields(SolverConfig):
        v = getattr(sc.solver, f.name)
        if v != getattr(default, f.name) and v is not None:
            items.append((f.name, tuple(float(g) for g in v) if f.name == "gravity" else v))
    section("solver", items)
    o = sc.output
    section("output", [("csv", o.csv), ("surface_every", o.surface_every), ("pressures", "true" if o.pressures else "false")])
    return out.getvalue().rstrip("\n") + "\n"


# ------------------------------------------------------------------ setup


def build_mesh(sc: Scenario) -> TetMesh:
    m = sc.mesh
    if m.generator == "grid":
        return make_grid(*m.shape, *m.size)
    if m.generator == "two_tet":
        return make_two_tet()
    return import_mesh(Path(sc.base_dir) / m.path)


def build_zones(sc: Scenario, mesh: TetMesh) -> ZoneSet | None:
    z = sc.zones
    if z.kind == "none":
        return None
    if z.kind == "global":
        return global_zone(mesh)
    if z.kind == "k_ring":
        return k_ring_zones(mesh, z.k)
    if z.kind == "per_element":
        return per_element_zones(mesh)
    if z.kind == "file":
        return read_zones(Path(sc.base_dir) / z.path, mesh)
    return zones_from_surface_weights(mesh, read_weights(Path(sc.base_dir) / z.path, mesh), z.threshold)


@dataclass
class _Setup:
    mesh: TetMesh
    zones: ZoneSet | None
    fixed: np.ndarray
    scripted: list[tuple[Script, np.ndarray]]

    def bc_at(self, t: float) -> BoundaryConditions:
        X = self.mesh.vertices
        idx = [v for _, v in self.scripted]
        if not idx:
            return BoundaryConditions(fixed=self.fixed)
        targets = np.concatenate([s.positions(X[v], t) for s, v in self.scripted])
        return BoundaryConditions(fixed=self.fixed, scripted=np.concatenate(idx), targets=targets)


def prepare(sc: Scenario) -> _Setup:
    """Build mesh, zones and vertex sets; raises ConfigError for bad references."""
    try:
        mesh = build_mesh(sc)
    except (OSError, MeshError) as exc:
        raise ConfigError(f"mesh: {exc}") from None
    try:
        zones = build_zones(sc, mesh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"zones: {exc}") from None
    try:
        fixed = select_vertices(mesh, sc.fixed)
        scripted = [(s, select_vertices(mesh, s.vertices)) for s in sc.scripts]
    except ValueError as exc:
        raise ConfigError(f"bc: {exc}") from None
    all_scripted = np.concatenate([v for _, v in scripted]) if scripted else np.zeros(0, np.int64)
    if len(np.unique(all_scripted)) != len(all_scripted):
        raise ConfigError("bc: a vertex belongs to more than one script")
    fixed = np.setdiff1d(fixed, all_scripted)
    return _Setup(mesh, zones, fixed, scripted)


# ------------------------------------------------------------- frame loop


def _metrics(frame, setup: _Setup, sc: Scenario, state: SimState, bc: BoundaryConditions, newton, outer, wall_ms):
    mesh = setup.mesh
    V = signed_volumes(mesh.tets, state.x)
    V0 = mesh.total_rest_volume
    total = float(V.sum())
    free = bc.free_dofs(mesh.n_vertices).reshape(-1, 3).any(axis=1)
    active = free[mesh.tets].any(axis=1)
    try:
        elastic = energy(mesh, state.x, sc.material, sc.epidermis, active=active).total
    except ValueError:
        elastic = math.inf
    if setup.zones is not None and len(setup.zones):
        res = float(np.max(np.abs(constraint_values(mesh, state.x, setup.zones)) / setup.zones.rest_volumes))
    else:
        res = 0.0
    return FrameMetrics(
        frame=frame,
        total_volume=total,
        volume_error_pct=100.0 * (total - V0) / V0,
        elastic_energy=float(elastic),
        kinetic_energy=kinetic_energy(mesh, state.v, sc.solver),
        max_constraint_residual=res,
        min_element_J=float(np.min(V / mesh.rest_volumes)),
        newton_iters=int(newton),
        outer_iters=int(outer),
        wall_ms=float(wall_ms),
    )


def harmonic_guess(mesh: TetMesh, x, bc: BoundaryConditions) -> np.ndarray:
    """Spread the Dirichlet displacement increment into the interior.

    Solves a graph-Laplace problem on the mesh edges, so a boundary that moves
    does not start the solve with a sheared layer of elements next to it.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    target = bc.apply(x.ravel()).reshape(-1, 3)
    d = bc.dirichlet
    n = mesh.n_vertices
    if len(d) == 0 or len(d) == n:
        return target.ravel()
    e = mesh.tets[:, [0, 0, 0, 1, 1, 2]], mesh.tets[:, [1, 2, 3, 2, 3, 3]]
    i, j = e[0].ravel(), e[1].ravel()
    A = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    A = ((A + A.T) > 0).astype(float)
    L = (sp.diags(np.asarray(A.sum(axis=1)).ravel()) - A).tocsr()
    free = np.ones(n, bool)
    free[d] = False
    u = np.zeros((n, 3))
    u[d] = target[d] - x[d]
    if not np.any(u[d]):
        return target.ravel()
    Lff = L[free][:, free].tocsc()
    rhs = -(L[free][:, d] @ u[d])
    u[free] = spla.splu(Lff).solve(rhs)
    return (x + u).ravel()


def _static_solve(sc, setup, t0, t1, x, x_prev, p, depth=0, max_depth=6):
    """Solve the static frame at ``t1`` starting from the solution at ``t0``.

    The initial guess extrapolates the previous increment, or spreads the
    boundary increment harmonically when there is no previous increment. If
    every guess has infinite energy, the boundary motion is split in halves
    recursively.
    """
    bc = setup.bc_at(t1)
    guesses = [x + (x - x_prev)] if x_prev is not None else []
    guesses += [harmonic_guess(setup.mesh, x, bc), x]
    for guess in guesses:
        try:
            return solve_static(setup.mesh, sc.material, setup.zones, bc, sc.solver, guess, epidermis=sc.epidermis, multipliers=p)
        except InfeasibleStartError:
            continue
    if depth >= max_depth:
        raise InfeasibleStartError(f"boundary motion inverts elements even after {max_depth} bisections")
    mid = 0.5 * (t0 + t1)
    a = _static_solve(sc, setup, t0, mid, x, None, p, depth + 1, max_depth)
    b = _static_solve(sc, setup, mid, t1, a.x, None, a.multipliers, depth + 1, max_depth)
    for k in ("newton_iters", "outer_iters"):
        b.diagnostics[k] += a.diagnostics[k]
    b.diagnostics["converged"] = a.diagnostics["converged"] and b.diagnostics["converged"]
    return b


def simulate(sc: Scenario, frames: int | None = None, *, keep_states: bool = False, callback=None) -> RunResult:
    """Run the frame loop in memory. Solver failures end the run early."""
    setup = prepare(sc)
    mesh, zones = setup.mesh, setup.zones
    nframes = sc.frames if frames is None else int(frames)
    state = SimState.at_rest(mesh, zones)
    if sc.perturbation:
        rng = np.random.default_rng(sc.seed)
        bc0 = setup.bc_at(0.0)
        free = bc0.free_dofs(mesh.n_vertices)
        h = mesh.total_rest_volume ** (1 / 3) / max(mesh.n_tets, 1) ** (1 / 3)
        state.x[free] += sc.perturbation * h * rng.uniform(-1, 1, int(free.sum()))
    dt = sc.solver.dt
    metrics, states = [], []
    converged, error = True, None
    x_prev = None
    for f in range(1, nframes + 1):
        t0, t1 = (f - 1) * dt, f * dt
        bc = setup.bc_at(t1)
        start = time.perf_counter()
        try:
            if sc.mode == "static":
                new = _static_solve(sc, setup, t0, t1, state.x, x_prev, state.multipliers)
                x_prev = state.x
                new = SimState(new.x, np.zeros_like(new.x), new.multipliers, t1, new.diagnostics)
            else:
                new = step_implicit_euler(state, mesh, sc.material, zones, bc, sc.solver, epidermis=sc.epidermis)
        except SolverError as exc:
            log.error("frame %d: %s", f, exc)
            converged, error = False, str(exc)
            break
        wall = 1e3 * (time.perf_counter() - start)
        d = new.diagnostics
        if not d.get("converged", False):
            converged = False
        state = new
        metrics.append(_metrics(f, setup, sc, state, bc, d.get("newton_iters", 0), d.get("outer_iters", 0), wall))
        if keep_states:
            states.append(state.x.copy())
        if callback is not None:
            callback(f, state, metrics[-1])
    pressures = compute_element_pressures(state, mesh, sc.material, zones)
    return RunResult(sc, mesh, zones, metrics, state, converged, error, pressures, states)


# ---------------------------------------------------------------- outputs


def format_metrics(metrics: list[FrameMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRAME_COLUMNS)
    for m in metrics:
        w.writerow(m.row())
    return buf.getvalue()


def write_metrics(metrics: list[FrameMetrics], path) -> None:
    _atomic_write(path, format_metrics(metrics))


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != FRAME_COLUMNS:
        raise ValueError(f"{path}: not a metrics file (unexpected header)")
    return [{k: float(v) for k, v in zip(rows[0], r)} for r in rows[1:]]


def run(sc: Scenario, out_dir=".", frames: int | None = None) -> RunResult:
    """Simulate and write the CSV, surface exports and optional pressures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    every = sc.output.surface_every

    def export(f, state, _m):
        if every and f % every == 0:
            export_surface(result_mesh[0], state.x, out / f"{sc.name}_{f:04d}.obj")

    result_mesh = [build_mesh(sc)] if every else [None]
    result = simulate(sc, frames, callback=export)
    write_metrics(result.metrics, out / sc.output.csv)
    if sc.output.pressures:
        _atomic_write(out / f"{sc.name}_pressure.txt", "".join(f"{v!r}\n" for v in result.pressures))
    return result


def run_scenario(config_path, *, frames: int | None = None, out_dir=None, seed: int | None = None) -> int:
    """Run one scenario file; returns 0, :data:`EXIT_CONFIG` or :data:`EXIT_SOLVER`.

    Configuration problems (including missing mesh or zone files) are
    detected before any output is written.
    """
    try:
        sc = load_scenario(config_path)
        if seed is not None:
            sc = replace(sc, seed=int(seed))
        prepare(sc)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    out = Path(out_dir) if out_dir is not None else Path(config_path).parent
    result = run(sc, out, frames)
    if result.exit_code != EXIT_OK:
        log.error("scenario %s failed: %s", sc.name, result.error or "did not converge")
    return result.exit_code


# -------------------------------------------------------------- analysis


@dataclass
class CompareReport:
    n_a: int
    n_b: int
    max_delta: dict[str, float]
    mean_delta: dict[str, float]

    @property
    def mismatched(self) -> bool:
        return self.n_a != self.n_b

    def format(self) -> str:
        lines = []
        if self.mismatched:
            lines.append(f"frame count mismatch: {self.n_a} vs {self.n_b}; comparing first {min(self.n_a, self.n_b)}")
        lines.append(f"{'column':<26}{'max |delta|':>16}{'mean |delta|':>16}")
        for c in self.max_delta:
            lines.append(f"{c:<26}{self.max_delta[c]:>16.6g}{self.mean_delta[c]:>16.6g}")
        return "\n".join(lines)


def compare_runs(csv_a, csv_b) -> CompareReport:
    """Align two metric streams by row and report per-column deltas."""
    a, b = read_metrics(csv_a), read_metrics(csv_b)
    n = min(len(a), len(b))
    mx, mean = {}, {}
    for c in FRAME_COLUMNS[1:]:
        d = np.array([abs(a[i][c] - b[i][c]) for i in range(n)])
        mx[c] = float(d.max()) if n else 0.0
        mean[c] = float(d.mean()) if n else 0.0
    return CompareReport(len(a), len(b), mx, mean)


def checkerboard_metric(mesh: TetMesh, pressures) -> float:
    """Mean |p_e - p_f| over face-adjacent pairs divided by the pressure range."""
    p = np.asarray(pressures, dtype=float)
    pairs = mesh.face_neighbors()
    rng = float(p.max() - p.min())
    if rng == 0 or len(pairs) == 0:
        return 0.0
    return float(np.mean(np.abs(p[pairs[:, 0]] - p[pairs[:, 1]])) / rng)


def mean_displacement(mesh: TetMesh, x, selector: str) -> np.ndarray:
    """Mean displacement of the selected vertices (e.g. a beam tip)."""
    v = select_vertices(mesh, selector)
    return (np.asarray(x).reshape(-1, 3)[v] - mesh.vertices[v]).mean(axis=0)


# --------------------------------------------------------------- built-ins

# Direction along which the left tet of the two-tet mesh is flattened.
_FLATTEN_TILT = math.radians(70.0)
_FLATTEN_DIR = (math.sin(_FLATTEN_TILT), 0.0, math.cos(_FLATTEN_TILT))
_NO_GRAVITY = (0.0, 0.0, 0.0)


def _two_tet(name, material, zones, desc):
    # Centre is the centroid of the shared face (vertices 1, 2, 3).
    script = Script("flatten", "indices: 0 1 2 3", "scale", [[0.0, 1.0], [1.0, 0.0]], direction=_FLATTEN_DIR, center=(1 / 3, 1 / 3, 0.0))
    return Scenario(
        name,
        MeshSpec("two_tet"),
        material,
        zones=ZoneSpec(zones),
        scripts=[script],
        frames=1,
        solver=SolverConfig(gravity=_NO_GRAVITY),
        description=desc,
    )


def _stretch(name, material, zones, desc, epidermis=None):
    return Scenario(
        name,
        MeshSpec("grid", (8, 8, 8)),
        material,
        epidermis,
        ZoneSpec(zones),
        fixed="xmin",
        scripts=[Script("pull", "xmax", "translate", [[0, 0, 0, 0], [14, 7, 0, 0]])],
        frames=14,
        solver=SolverConfig(gravity=_NO_GRAVITY),
        description=desc,
    )


def _twist(name, material, zones, desc):
    return Scenario(
        name,
        MeshSpec("grid", (6, 6, 6)),
        material,
        zones=ZoneSpec(zones),
        fixed="zmin",
        scripts=[Script("turn", "zmax", "rotate", [[0, 0], [12, 1.5 * math.pi]], axis=(0, 0, 1), center=(0.5, 0.5, 1.0))],
        frames=12,
        solver=SolverConfig(gravity=_NO_GRAVITY),
        description=desc,
    )


def _standing(name, material, zones, k=1):
    return Scenario(
        name,
        MeshSpec("grid", (8, 8, 8)),
        material,
        zones=ZoneSpec(zones, k),
        fixed="zmin",
        frames=1,
        solver=SolverConfig(mass_density=1.0),
        output=OutputPlan(pressures=True),
        description="cube under gravity with the bottom face fixed; per-element pressures",
    )


def _cantilever(name, material, zones, k=1):
    return Scenario(
        name,
        MeshSpec("grid", (16, 4, 4), (5.0, 1.0, 1.0)),
        material,
        zones=ZoneSpec(zones, k),
        fixed="xmin",
        frames=1,
        solver=SolverConfig(mass_density=0.05),
        description="beam under gravity with the left face fixed",
    )


def builtin_scenarios() -> list[Scenario]:
    """The experiment suite at desk-scale resolution."""
    unh_soft = MaterialParams.from_young_poisson(1.0, 0.495, model="UNH")
    s = [
        _two_tet("two_tet_unh", unh_soft, "none", "left tet flattened; unconstrained UNH, nu = 0.495"),
        _two_tet("two_tet_cnh", MaterialParams(mu=1.0, lam=10.0, beta=1.0), "global", "left tet flattened; global volume zone"),
    ]
    for lam in (10, 25, 100):
        s.append(_stretch(f"stretch_unh_lam{lam}", MaterialParams(mu=1.0, lam=float(lam), model="UNH"), "none", "cube pulled to 8x length, unconstrained"))
    s.append(_stretch("stretch_cnh", MaterialParams(mu=1.0, lam=25.0, beta=1.0), "global", "cube pulled to 8x length, global zone"))
    s.append(_stretch("stretch_cnh_beta0", MaterialParams(mu=1.0, lam=25.0, beta=0.0), "global", "as stretch_cnh with beta = 0"))
    s.append(
        _stretch(
            "stretch_cnh_epidermis",
            MaterialParams(mu=1.0, lam=25.0, beta=1.0),
            "global",
            "as stretch_cnh with the epidermis term",
            EpidermisParams(10.0, 1.0),
        )
    )
    s.append(_twist("twist_unh", MaterialParams(mu=4.0, lam=100.0, model="UNH"), "none", "top face twisted by 3pi/2, unconstrained"))
    s.append(_twist("twist_penalty_beta9", MaterialParams(mu=4.0, lam=100.0, beta=9.0), "none", "twist with the beta = 9 compression penalty"))
    s.append(_twist("twist_cnh", MaterialParams(mu=4.0, lam=100.0, beta=1.0), "global", "twist with a global zone"))
    s.append(_standing("standing_cube_cnh", MaterialParams(mu=10.0, lam=100.0, beta=1.0), "global"))
    s.append(_standing("standing_cube_ring1", MaterialParams(mu=10.0, lam=0.0), "k_ring", 1))
    s.append(_standing("standing_cube_global_nopenalty", MaterialParams(mu=10.0, lam=0.0), "global"))
    beam = MaterialParams(mu=100.0, lam=0.0)
    s.append(_cantilever("cantilever_hydrostatic", beam, "global"))
    for k in (4, 2, 1):
        s.append(_cantilever(f"cantilever_ring{k}", beam, "k_ring", k))
    s.append(_cantilever("cantilever_unh", MaterialParams.from_young_poisson(2 * 100.0 * 1.499, 0.499, model="UNH"), "none"))
    s.append(
        Scenario(
            "suspend_dynamic",
            MeshSpec("grid", (5, 5, 5)),
            MaterialParams(mu=100.0, lam=40.0, beta=1.0),
            zones=ZoneSpec("global"),
            fixed="zmin",
            mode="dynamic",
            frames=200,
            solver=SolverConfig(dt=0.008, mass_density=10.0),
            description="soft cube under gravity, implicit Euler at h = 8 ms",
        )
    )
    s.append(
        Scenario(
            "element_limit",
            MeshSpec("grid", (3, 3, 3)),
            MaterialParams(mu=1.0, lam=10.0),
            zones=ZoneSpec("per_element"),
            fixed="zmin",
            scripts=[Script("push", "indices: 22", "translate", [[0, 0, 0, 0], [1, 0, 0, -0.05]])],
            frames=1,
            solver=SolverConfig(gravity=_NO_GRAVITY),
            description="one zone per element; top centre vertex pushed down",
        )
    )
    return s


def get_builtin(name: str) -> Scenario:
    for sc in builtin_scenarios():
        if sc.name == name:
            return sc
    raise KeyError(f"no built-in scenario named {name!r}")
