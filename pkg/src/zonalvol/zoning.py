"""Zone construction: global, k-ring and surface-painted zones."""

from __future__ import annotations

import logging
import warnings
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .constraints import ZoneSet
from .mesh import TetMesh

log = logging.getLogger(__name__)


class WeightFormatError(ValueError):
    pass


def global_zone(mesh: TetMesh) -> ZoneSet:
    return ZoneSet.from_element_sets(mesh, [np.arange(mesh.n_tets)], ["global"])


def per_element_zones(mesh: TetMesh) -> ZoneSet:
    return ZoneSet.from_element_sets(mesh, [[e] for e in range(mesh.n_tets)], [f"e{e}" for e in range(mesh.n_tets)])


def _incidence(mesh: TetMesh) -> sp.csr_matrix:
    rows = np.repeat(np.arange(mesh.n_tets), 4)
    return sp.csr_matrix((np.ones(4 * mesh.n_tets), (rows, mesh.tets.ravel())), shape=(mesh.n_tets, mesh.n_vertices))


def k_ring_zones(mesh: TetMesh, k: int) -> ZoneSet:
    """One zone per vertex.

    Ring 1 is the set of tets incident to the vertex (the classic one-ring);
    ring k+1 adds every tet that shares at least one vertex with ring k.
    """
    if int(k) != k or k < 1:
        raise ValueError("k must be a positive integer")
    A = _incidence(mesh)
    Z = A.T.tocsr().astype(bool).astype(float)  # vertices x tets
    share = (A @ A.T).astype(bool).astype(float)  # tets sharing a vertex
    for _ in range(int(k) - 1):
        Z = (Z @ share).astype(bool).astype(float).tocsr()
    Z = Z.tocsr()
    sets = [Z.indices[Z.indptr[v] : Z.indptr[v + 1]] for v in range(mesh.n_vertices)]
    keep = [v for v, s in enumerate(sets) if len(s)]
    return ZoneSet.from_element_sets(mesh, [sets[v] for v in keep], [f"v{v}" for v in keep])


# ------------------------------------------------------------ surface zones


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point on each triangle (a, b, c) to points p, all broadcast.

    Returns ``(point, (u, v, w))`` with barycentric weights for a, b, c.
    Region tests follow the standard Voronoi-region construction.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    shape = np.broadcast(d1, d2).shape
    v = np.zeros(shape)
    w = np.zeros(shape)
    done = np.zeros(shape, bool)

    def assign(mask, vv, ww):
        nonlocal done
        m = mask & ~done
        v[m] = np.broadcast_to(vv, shape)[m]
        w[m] = np.broadcast_to(ww, shape)[m]
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), 0.0, 0.0)  # vertex a
        assign((d3 >= 0) & (d4 <= d3), 1.0, 0.0)  # vertex b
        assign((d6 >= 0) & (d5 <= d6), 0.0, 1.0)  # vertex c
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), d1 / (d1 - d3), 0.0)  # edge ab
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 0.0, d2 / (d2 - d6))  # edge ac
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), 1.0 - t, t)  # edge bc
        denom = va + vb + vc
        assign(np.ones(shape, bool), vb / denom, vc / denom)  # interior
    u = 1.0 - v - w
    q = u[..., None] * a + v[..., None] * b + w[..., None] * c
    return q, np.stack([u, v, w], axis=-1)


def project_to_surface(mesh: TetMesh, points: np.ndarray, chunk: int = 256):
    """Nearest surface triangle and barycentric coordinates for each point.

    Ties go to the lowest triangle index.
    """
    tri = mesh.surface
    A, B, C = (mesh.vertices[tri[:, k]] for k in range(3))
    best_t = np.empty(len(points), dtype=np.int64)
    best_bary = np.empty((len(points), 3))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk, None, :]
        q, bary = closest_points_on_triangles(p, A[None], B[None], C[None])
        d2 = np.sum((q - p) ** 2, axis=-1)
        t = np.argmin(d2, axis=1)
        best_t[s : s + chunk] = t
        best_bary[s : s + chunk] = bary[np.arange(len(t)), t]
    return best_t, best_bary


def zones_from_surface_weights(mesh: TetMesh, weights: dict[str, np.ndarray], threshold: float = 0.5) -> ZoneSet:
    """Project tet centroids to the surface and inherit painted labels.

    ``weights`` maps a label to a per-vertex weight array (only surface
    vertices matter). A tet joins every label whose barycentrically
    interpolated weight at its projection exceeds ``threshold``; labels that
    catch no tet are dropped with a warning.
    """
    tri_idx, bary = project_to_surface(mesh, mesh.centroids())
    corners = mesh.surface[tri_idx]  # (m, 3)
    sets, labels = [], []
    faces = mesh.face_neighbors()
    for label, w in weights.items():
        w = np.asarray(w, dtype=float)
        if w.shape != (mesh.n_vertices,) or not np.all(np.isfinite(w)):
            raise ValueError(f"weights for {label!r} must be finite with one entry per vertex")
        value = np.einsum("mk,mk->m", bary, w[corners])
        elems = np.flatnonzero(value > threshold)
        if len(elems) == 0:
            warnings.warn(f"zone {label!r} selects no elements; dropped", stacklevel=2)
            continue
        inside = np.zeros(mesh.n_tets, bool)
        inside[elems] = True
        pairs = faces[inside[faces[:, 0]] & inside[faces[:, 1]]]
        remap = np.full(mesh.n_tets, -1)
        remap[elems] = np.arange(len(elems))
        g = sp.coo_matrix((np.ones(len(pairs)), (remap[pairs[:, 0]], remap[pairs[:, 1]])), shape=(len(elems),) * 2)
        ncomp, _ = connected_components(g, directed=False)
        if ncomp > 1:
            warnings.warn(f"zone {label!r} is not connected ({ncomp} components)", stacklevel=2)
        sets.append(elems)
        labels.append(label)
    return ZoneSet.from_element_sets(mesh, sets, labels)


def parse_weights(text: str, n_vertices: int, path: str | None = None) -> dict[str, np.ndarray]:
    """Parse ``vertex_index label weight`` lines into per-label arrays."""
    out: dict[str, np.ndarray] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        ln = raw.split("#", 1)[0].strip()
        if not ln:
            continue
        parts = ln.split()
        where = f"{path + ':' if path else ''}line {n}"
        if len(parts) != 3:
            raise WeightFormatError(f"{where}: expected 'vertex_index label weight', got {ln!r}")
        try:
            v, w = int(parts[0]), float(parts[2])
        except ValueError:
            raise WeightFormatError(f"{where}: malformed record {ln!r}") from None
        if not 0 <= v < n_vertices:
            raise WeightFormatError(f"{where}: vertex index {v} out of range")
        if not np.isfinite(w):
            raise WeightFormatError(f"{where}: non-finite weight")
        out.setdefault(parts[1], np.zeros(n_vertices))[v] = w
    return out


def read_weights(path, mesh: TetMesh) -> dict[str, np.ndarray]:
    return parse_weights(Path(path).read_text(), mesh.n_vertices, str(path))
