"""Tetrahedral meshes: rest-state precomputation, generators, deformation
gradients, surface extraction and text/OBJ I/O."""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# Outward faces of a positively oriented tet (i0, i1, i2, i3).
TET_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


class MeshError(ValueError):
    """Invalid mesh data."""


class MeshFormatError(MeshError):
    """Parse failure in a mesh file; ``line`` is 1-based (0 when not tied to a line)."""

    def __init__(self, message: str, line: int = 0, path: str | None = None):
        self.line = line
        self.path = path
        where = f"{path}:" if path else ""
        where += f"line {line}: " if line else ""
        super().__init__(where + message)


def as_points(x) -> np.ndarray:
    """View a stacked 3n vector (or an (n, 3) array) as an (n, 3) array."""
    return np.asarray(x, dtype=float).reshape(-1, 3)


def tet_signed_volume(x0, x1, x2, x3) -> float:
    """Signed volume ``v3 . (v1 x v2) / 6`` with ``vi = xi - x0``."""
    x0 = np.asarray(x0, dtype=float)
    v1, v2, v3 = (np.asarray(p, dtype=float) - x0 for p in (x1, x2, x3))
    return float(np.dot(v3, np.cross(v1, v2)) / 6.0)


def signed_volumes(tets: np.ndarray, x) -> np.ndarray:
    """Signed volumes of all tets at positions ``x``."""
    p = as_points(x)
    x0 = p[tets[:, 0]]
    v1 = p[tets[:, 1]] - x0
    v2 = p[tets[:, 2]] - x0
    v3 = p[tets[:, 3]] - x0
    return np.einsum("ij,ij->i", v3, np.cross(v1, v2)) / 6.0


def shape_matrices(tets: np.ndarray, x) -> np.ndarray:
    """Edge matrices ``Ds`` with columns ``x1-x0, x2-x0, x3-x0``; shape (m, 3, 3)."""
    p = as_points(x)
    x0 = p[tets[:, 0]]
    cols = [p[tets[:, k]] - x0 for k in (1, 2, 3)]
    return np.stack(cols, axis=-1)


def extract_surface(tets: np.ndarray) -> np.ndarray:
    """Boundary triangles (faces owned by exactly one tet), oriented outward.

    Assumes positively oriented tets. Faces shared by more than two tets
    indicate a non-manifold mesh and raise ``MeshError``.
    """
    faces = tets[:, TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts > 2):
        raise MeshError("non-manifold mesh: a face is shared by more than two tets")
    return faces[counts[inverse] == 1]


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Reference tetrahedral mesh with precomputed rest quantities.

    Build with :meth:`from_arrays`; the arrays are treated as read-only.
    """

    vertices: np.ndarray
    tets: np.ndarray
    rest_volumes: np.ndarray
    rest_inverse_shape: np.ndarray
    surface: np.ndarray
    surface_rest_basis: np.ndarray
    surface_rest_inverse: np.ndarray
    surface_rest_areas: np.ndarray
    _adjacency: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_arrays(cls, vertices, tets, *, fix_orientation: bool = True) -> "TetMesh":
        vertices = np.array(vertices, dtype=float).reshape(-1, 3)
        tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
        if len(vertices) == 0:
            raise MeshError("no vertices")
        if len(tets) == 0:
            raise MeshError("no tets")
        if tets.min() < 0 or tets.max() >= len(vertices):
            raise MeshError("tet index out of range")
        if np.any([len(set(t)) < 4 for t in tets.tolist()]):
            raise MeshError("tet with repeated vertex")

        vol = signed_volumes(tets, vertices)
        scale = np.ptp(vertices, axis=0).max() ** 3 if len(vertices) > 1 else 1.0
        degenerate = np.abs(vol) <= 1e-14 * scale
        if np.any(degenerate):
            raise MeshError(f"degenerate tet(s) with zero rest volume: {np.flatnonzero(degenerate)[:10].tolist()}")
        neg = vol < 0
        if np.any(neg):
            if not fix_orientation:
                raise MeshError("negatively oriented tets")
            log.debug("reorienting %d inverted tets", int(neg.sum()))
            tets[neg] = tets[neg][:, [0, 2, 1, 3]]
            vol = np.abs(vol)

        Dm = shape_matrices(tets, vertices)
        Dm_inv = np.linalg.inv(Dm)

        surface = extract_surface(tets)
        basis, tri_inv, areas = _triangle_rest_frames(vertices, surface)

        for arr in (vertices, tets, vol, Dm_inv, surface, basis, tri_inv, areas):
            arr.setflags(write=False)
        return cls(vertices, tets, vol, Dm_inv, surface, basis, tri_inv, areas)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def total_rest_volume(self) -> float:
        return float(self.rest_volumes.sum())

    def reference_positions(self) -> np.ndarray:
        """Flat 3n copy of the reference vertex positions."""
        return self.vertices.reshape(-1).copy()

    def vertex_tets(self) -> list[np.ndarray]:
        """Incident tet indices for every vertex (cached)."""
        if "vertex_tets" not in self._adjacency:
            order = np.argsort(self.tets.ravel(), kind="stable")
            owners = order // 4
            counts = np.bincount(self.tets.ravel(), minlength=self.n_vertices)
            self._adjacency["vertex_tets"] = np.split(owners, np.cumsum(counts)[:-1])
        return self._adjacency["vertex_tets"]

    def face_neighbors(self) -> np.ndarray:
        """Pairs (e, f), e < f, of tets sharing a face."""
        if "face_pairs" not in self._adjacency:
            keys = np.sort(self.tets[:, TET_FACES].reshape(-1, 3), axis=1)
            owner = np.repeat(np.arange(self.n_tets), 4)
            order = np.lexsort(keys.T[::-1])
            k = keys[order]
            same = np.all(k[1:] == k[:-1], axis=1)
            a = owner[order][:-1][same]
            b = owner[order][1:][same]
            pairs = np.sort(np.stack([a, b], axis=1), axis=1)
            self._adjacency["face_pairs"] = pairs
        return self._adjacency["face_pairs"]

    def centroids(self, x=None) -> np.ndarray:
        p = self.vertices if x is None else as_points(x)
        return p[self.tets].mean(axis=1)


def _triangle_rest_frames(vertices: np.ndarray, tris: np.ndarray):
    x0 = vertices[tris[:, 0]]
    e1 = vertices[tris[:, 1]] - x0
    e2 = vertices[tris[:, 2]] - x0
    t1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    w = e2 - np.einsum("ij,ij->i", e2, t1)[:, None] * t1
    t2 = w / np.linalg.norm(w, axis=1, keepdims=True)
    basis = np.stack([t1, t2], axis=-1)  # (k, 3, 2)
    D = np.einsum("kai,kab->kib", basis, np.stack([e1, e2], axis=-1))  # (k, 2, 2)
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    return basis, np.linalg.inv(D), areas


def deformation_gradients(mesh: TetMesh, x) -> np.ndarray:
    """``F = Ds(x) Dm^-1`` for every tet; shape (m, 3, 3)."""
    return shape_matrices(mesh.tets, x) @ mesh.rest_inverse_shape


def deformation_gradient(mesh: TetMesh, x, e: int) -> np.ndarray:
    p = as_points(x)
    t = mesh.tets[e]
    Ds = np.stack([p[t[k]] - p[t[0]] for k in (1, 2, 3)], axis=1)
    return Ds @ mesh.rest_inverse_shape[e]


def reduced_deformation_gradients(mesh: TetMesh, x) -> np.ndarray:
    """3x2 surface deformation gradients for every boundary triangle."""
    p = as_points(x)
    tri = mesh.surface
    x0 = p[tri[:, 0]]
    Ds = np.stack([p[tri[:, 1]] - x0, p[tri[:, 2]] - x0], axis=-1)
    return Ds @ mesh.surface_rest_inverse


def reduced_deformation_gradient(mesh: TetMesh, x, t: int) -> np.ndarray:
    p = as_points(x)
    a, b, c = mesh.surface[t]
    Ds = np.stack([p[b] - p[a], p[c] - p[a]], axis=1)
    return Ds @ mesh.surface_rest_inverse[t]


def area_ratio(Ft: np.ndarray) -> np.ndarray:
    """``sqrt(det(Ft^T Ft))`` for one or many 3x2 matrices."""
    return np.linalg.norm(np.cross(Ft[..., :, 0], Ft[..., :, 1]), axis=-1)


# ---------------------------------------------------------------- generators


def make_two_tet() -> TetMesh:
    """Two congruent tets glued along one face.

    The shared face is the triangle (1, 2, 3) in the plane z = 0; vertex 0
    sits below it and vertex 4 is its mirror image above, so both tets have
    volume 1/6. Vertex 3 is off-centre, which keeps the left tet from being
    symmetric about the axis that the built-in scenarios flatten along.
    """
    vertices = np.array(
        [
            [0.25, 0.25, -1.0],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.25, 0.25, 1.0],
        ]
    )
    tets = np.array([[0, 1, 2, 3], [4, 1, 3, 2]])
    return TetMesh.from_arrays(vertices, tets)


_CUBE_CORNERS = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)])
_FIVE_TET_EVEN = np.array([[1, 2, 4, 7], [0, 1, 2, 4], [3, 1, 2, 7], [5, 1, 4, 7], [6, 2, 4, 7]])
_FIVE_TET_ODD = np.array([[0, 3, 5, 6], [1, 0, 3, 5], [2, 0, 3, 6], [4, 0, 5, 6], [7, 3, 5, 6]])


def make_grid(nx: int, ny: int, nz: int, lx: float = 1.0, ly: float = 1.0, lz: float = 1.0) -> TetMesh:
    """Box [0,lx]x[0,ly]x[0,lz] with nx*ny*nz vertices, five tets per cell.

    Cells alternate between the two mirror-image five-tet splits by the
    parity of i+j+k so that shared cell faces get matching diagonals.
    Vertex (i, j, k) has index ``i + nx*(j + ny*k)``.
    """
    for n in (nx, ny, nz):
        if int(n) != n or n < 2:
            raise MeshError(f"grid vertex counts must be integers >= 2, got {(nx, ny, nz)}")
    if min(lx, ly, lz) <= 0:
        raise MeshError("grid extents must be positive")
    xs, ys, zs = np.linspace(0, lx, nx), np.linspace(0, ly, ny), np.linspace(0, lz, nz)
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return i + nx * (j + ny * k)

    tets = []
    for k in range(nz - 1):
        for j in range(ny - 1):
            for i in range(nx - 1):
                corner_ids = np.array([vid(i + a, j + b, k + c) for a, b, c in _CUBE_CORNERS])
                split = _FIVE_TET_EVEN if (i + j + k) % 2 == 0 else _FIVE_TET_ODD
                tets.append(corner_ids[split])
    return TetMesh.from_arrays(vertices, np.concatenate(tets))


# ----------------------------------------------------------------------- I/O


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_mesh(text: str, path: str | None = None) -> TetMesh:
    """Parse the ``tetmesh 1`` text format."""
    lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(n, ln) for n, ln in lines if ln]
    if not lines:
        raise MeshFormatError("no vertices", 0, path)
    it = iter(lines)

    n, header = next(it)
    if header.split() != ["tetmesh", "1"]:
        raise MeshFormatError(f"expected header 'tetmesh 1', got {header!r}", n, path)

    def count(what):
        try:
            n, ln = next(it)
        except StopIteration:
            raise MeshFormatError(f"no {what}", 0, path) from None
        try:
            c = int(ln)
        except ValueError:
            raise MeshFormatError(f"expected {what} count, got {ln!r}", n, path) from None
        if c < 0:
            raise MeshFormatError(f"negative {what} count", n, path)
        return c

    nv = count("vertices")
    if nv == 0:
        raise MeshFormatError("no vertices", 0, path)
    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            n, ln = next(it)
        except StopIteration:
            raise MeshFormatError(f"expected {nv} vertices, found {i}", 0, path) from None
        parts = ln.split()
        try:
            if len(parts) != 3:
                raise ValueError
            verts[i] = [float(v) for v in parts]
        except ValueError:
            raise MeshFormatError(f"malformed vertex {ln!r}", n, path) from None

    nt = count("tets")
    tets = np.empty((nt, 4), dtype=np.int64)
    for i in range(nt):
        try:
            n, ln = next(it)
        except StopIteration:
            raise MeshFormatError(f"expected {nt} tets, found {i}", 0, path) from None
        parts = ln.split()
        try:
            if len(parts) != 4:
                raise ValueError
            idx = [int(v) for v in parts]
        except ValueError:
            raise MeshFormatError(f"malformed tet {ln!r}", n, path) from None
        if min(idx) < 0 or max(idx) >= nv:
            raise MeshFormatError(f"tet index out of range in {ln!r} (vertex count {nv})", n, path)
        tets[i] = idx
    extra = next(it, None)
    if extra is not None:
        raise MeshFormatError(f"unexpected trailing data {extra[1]!r}", extra[0], path)
    try:
        return TetMesh.from_arrays(verts, tets)
    except MeshError as exc:
        raise MeshFormatError(str(exc), 0, path) from None


def import_mesh(path) -> TetMesh:
    path = Path(path)
    return parse_mesh(path.read_text(), str(path))


def format_mesh(mesh: TetMesh, x=None) -> str:
    p = mesh.vertices if x is None else as_points(x)
    out = ["tetmesh 1", str(len(p))]
    out += [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in p]
    out.append(str(mesh.n_tets))
    out += [" ".join(map(str, t)) for t in mesh.tets]
    return "\n".join(out) + "\n"


def write_mesh(mesh: TetMesh, path, x=None) -> None:
    """Write the tet mesh (optionally at deformed positions ``x``)."""
    _atomic_write(path, format_mesh(mesh, x))


def export_surface(mesh: TetMesh, x, path) -> None:
    """Write the deformed boundary surface as an OBJ triangle mesh.

    Only vertices referenced by the surface are written; faces keep their
    outward orientation.
    """
    p = as_points(x)
    used = np.unique(mesh.surface)
    remap = np.full(mesh.n_vertices, -1)
    remap[used] = np.arange(len(used))
    out = [f"v {a:.17g} {b:.17g} {c:.17g}" for a, b, c in p[used]]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in remap[mesh.surface]]
    _atomic_write(path, "\n".join(out) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Minimal OBJ reader (``v`` and triangular ``f`` records)."""
    verts, faces = [], []
    for n, ln in enumerate(Path(path).read_text().splitlines(), 1):
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(v.split("/")[0]) - 1 for v in parts[1:]]
            if len(idx) != 3:
                raise MeshFormatError("only triangles are supported", n, str(path))
            faces.append(idx)
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
