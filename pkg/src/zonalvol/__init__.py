"""Volume-preserving hyperelastic FEM on tetrahedral meshes with zonal constraints."""

from .constraints import Zone, ZoneSet
from .energy import EpidermisParams, MaterialParams, Model
from .mesh import TetMesh, make_grid, make_two_tet
from .scenarios import Scenario, builtin_scenarios, get_builtin, simulate
from .solver import BoundaryConditions, SimState, SolverConfig, solve_static, step_implicit_euler

__version__ = "0.1.0"

__all__ = [
    "BoundaryConditions",
    "EpidermisParams",
    "MaterialParams",
    "Model",
    "Scenario",
    "SimState",
    "SolverConfig",
    "TetMesh",
    "Zone",
    "ZoneSet",
    "builtin_scenarios",
    "get_builtin",
    "make_grid",
    "make_two_tet",
    "simulate",
    "solve_static",
    "step_implicit_euler",
]
