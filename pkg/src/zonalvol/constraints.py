"""Zonal volume constraints: values, sparse Jacobians and Hessians."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .energy import det_hessian, scatter_matrix
from .mesh import TET_FACES, TetMesh, as_points, shape_matrices, signed_volumes


class ZoneFormatError(ValueError):
    def __init__(self, message: str, line: int = 0, path: str | None = None):
        self.line = line
        prefix = (f"{path}:" if path else "") + (f"line {line}: " if line else "")
        super().__init__(prefix + message)


@dataclass(frozen=True, eq=False)
class Zone:
    elements: np.ndarray
    rest_volume: float
    label: str = ""


@dataclass(eq=False)
class ZoneSet:
    """Possibly overlapping element zones, one volume constraint each."""

    zones: list[Zone]
    n_elements: int
    _membership: sp.csr_matrix | None = field(default=None, repr=False)

    @classmethod
    def from_element_sets(cls, mesh: TetMesh, sets, labels=None) -> "ZoneSet":
        zones = []
        labels = list(labels) if labels is not None else [f"zone{j}" for j in range(len(sets))]
        for elems, label in zip(sets, labels):
            elems = np.unique(np.asarray(elems, dtype=np.int64))
            if len(elems) == 0:
                raise ValueError(f"zone {label!r} is empty")
            if elems.min() < 0 or elems.max() >= mesh.n_tets:
                raise ValueError(f"zone {label!r} references an invalid element")
            zones.append(Zone(elems, float(mesh.rest_volumes[elems].sum()), label))
        return cls(zones, mesh.n_tets)

    def __len__(self) -> int:
        return len(self.zones)

    def __iter__(self):
        return iter(self.zones)

    @property
    def labels(self) -> list[str]:
        return [z.label for z in self.zones]

    @property
    def rest_volumes(self) -> np.ndarray:
        return np.array([z.rest_volume for z in self.zones])

    @property
    def membership(self) -> sp.csr_matrix:
        """(zones x elements) 0/1 incidence matrix."""
        if self._membership is None:
            rows = np.concatenate([np.full(len(z.elements), j) for j, z in enumerate(self.zones)] or [[]])
            cols = np.concatenate([z.elements for z in self.zones] or [[]])
            self._membership = sp.csr_matrix(
                (np.ones(len(rows)), (rows.astype(int), cols.astype(int))), shape=(len(self.zones), self.n_elements)
            )
        return self._membership


def volume_gradients(mesh: TetMesh, x) -> np.ndarray:
    """Per-tet dV/dx stencils, shape (m, 4, 3)."""
    Ds = shape_matrices(mesh.tets, x)
    v1, v2, v3 = Ds[..., 0], Ds[..., 1], Ds[..., 2]
    g1 = np.cross(v2, v3) / 6
    g2 = np.cross(v3, v1) / 6
    g3 = np.cross(v1, v2) / 6
    return np.stack([-(g1 + g2 + g3), g1, g2, g3], axis=1)


def volume_hessians(mesh: TetMesh, x) -> np.ndarray:
    """Per-tet d2V/dx2 stencils, shape (m, 12, 12); off-diagonal blocks are skew."""
    Ds = shape_matrices(mesh.tets, x)
    Hv = det_hessian(Ds) / 6  # w.r.t. (v1, v2, v3)
    m = len(Ds)
    T = np.zeros((9, 12))
    for k in range(3):
        T[3 * k : 3 * k + 3, 0:3] = -np.eye(3)
        T[3 * k : 3 * k + 3, 3 * (k + 1) : 3 * (k + 2)] = np.eye(3)
    return (T.T @ Hv.reshape(m, 9, 9) @ T).reshape(m, 12, 12)


def element_volume_jacobian(mesh: TetMesh, x) -> sp.csr_matrix:
    """(elements x 3n) sparse matrix of dV_e/dx."""
    g = volume_gradients(mesh, x).reshape(mesh.n_tets, 12)
    dofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(mesh.n_tets, 12)
    rows = np.repeat(np.arange(mesh.n_tets), 12)
    return sp.csr_matrix((g.ravel(), (rows, dofs.ravel())), shape=(mesh.n_tets, 3 * mesh.n_vertices))


def constraint_values(mesh: TetMesh, x, zones: ZoneSet) -> np.ndarray:
    V = signed_volumes(mesh.tets, x)
    return zones.membership @ V - zones.rest_volumes


def constraint_jacobians(mesh: TetMesh, x, zones: ZoneSet) -> sp.csr_matrix:
    """(zones x 3n) constraint Jacobian."""
    return (zones.membership @ element_volume_jacobian(mesh, x)).tocsr()


def weighted_constraint_hessian(mesh: TetMesh, x, zones: ZoneSet, weights) -> sp.csr_matrix:
    """``sum_j weights[j] * d2c_j/dx2`` assembled as one sparse matrix."""
    w_e = zones.membership.T @ np.asarray(weights, dtype=float)
    H = volume_hessians(mesh, x) * w_e[:, None, None]
    return scatter_matrix(mesh.tets, H, 3 * mesh.n_vertices)


def _single(mesh, zone: Zone) -> ZoneSet:
    return ZoneSet([zone], mesh.n_tets)


def constraint_value(mesh: TetMesh, x, zone: Zone) -> float:
    """Current zone volume minus rest zone volume."""
    V = signed_volumes(mesh.tets[zone.elements], x)
    return float(V.sum() - zone.rest_volume)


def constraint_jacobian(mesh: TetMesh, x, zone: Zone) -> sp.csr_matrix:
    """Gradient of one zone constraint as a sparse (1 x 3n) row."""
    return constraint_jacobians(mesh, x, _single(mesh, zone))


def constraint_hessian(mesh: TetMesh, x, zone: Zone) -> sp.csr_matrix:
    return weighted_constraint_hessian(mesh, x, _single(mesh, zone), [1.0])


def zone_boundary_faces(mesh: TetMesh, elements) -> np.ndarray:
    """Outward faces of a zone (faces used by exactly one of its tets)."""
    faces = mesh.tets[np.asarray(elements)][:, TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return faces[counts[inv.ravel()] == 1]


def zone_volume_via_boundary(mesh: TetMesh, x, zone: Zone | np.ndarray) -> float:
    """Zone volume from the divergence theorem over its boundary faces."""
    elements = zone.elements if isinstance(zone, Zone) else zone
    faces = zone_boundary_faces(mesh, elements)
    p = as_points(x)
    a, b, c = p[faces[:, 0]], p[faces[:, 1]], p[faces[:, 2]]
    # Shift to a local origin to limit cancellation.
    o = p[np.unique(faces)].mean(axis=0)
    a, b, c = a - o, b - o, c - o
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6)


# ------------------------------------------------------------------ zone files


def parse_zones(text: str, mesh: TetMesh, path: str | None = None) -> ZoneSet:
    """Parse ``label: e0 e1 ...`` lines; the body ``global`` selects all tets."""
    sets, labels = [], []
    for n, raw in enumerate(text.splitlines(), 1):
        ln = raw.split("#", 1)[0].strip()
        if not ln:
            continue
        if ":" not in ln:
            if ln == "global":
                labels.append("global")
                sets.append(np.arange(mesh.n_tets))
                continue
            raise ZoneFormatError(f"expected 'label: indices', got {ln!r}", n, path)
        label, body = (s.strip() for s in ln.split(":", 1))
        if body == "global":
            sets.append(np.arange(mesh.n_tets))
        else:
            try:
                idx = np.array([int(t) for t in body.split()], dtype=np.int64)
            except ValueError:
                raise ZoneFormatError(f"non-integer element index in {body!r}", n, path) from None
            if len(idx) == 0:
                raise ZoneFormatError(f"zone {label!r} is empty", n, path)
            if idx.min() < 0 or idx.max() >= mesh.n_tets:
                raise ZoneFormatError(f"element index out of range in zone {label!r}", n, path)
            sets.append(idx)
        labels.append(label or f"zone{len(labels)}")
    return ZoneSet.from_element_sets(mesh, sets, labels)


def read_zones(path, mesh: TetMesh) -> ZoneSet:
    return parse_zones(Path(path).read_text(), mesh, str(path))


def format_zones(zones: ZoneSet) -> str:
    lines = []
    for z in zones:
        if len(z.elements) == zones.n_elements:
            lines.append(f"{z.label}: global")
        else:
            lines.append(f"{z.label}: " + " ".join(map(str, z.elements)))
    return "\n".join(lines) + "\n"
