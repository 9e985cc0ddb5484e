"""Lattice evaluation, marching cubes and area-uniform mesh sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._mc_table import CORNERS, EDGES, TRIANGLES

_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGES = np.array(EDGES, dtype=np.int64)
_TRI = np.full((256, 15), -1, dtype=np.int64)
for _case, _row in enumerate(TRIANGLES):
    _TRI[_case, : len(_row)] = _row
_TRI_COUNT = np.array([len(r) for r in TRIANGLES], dtype=np.int64)


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per (face, side), sorted within each row."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0))
        used = len(np.unique(self.faces))
        return used - n_edges + len(self.faces)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def grid_points(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Lattice coordinates, shape ``(resolution**3, 3)``, x varying slowest."""
    axis = np.linspace(lo, hi, resolution)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


def marching_cubes(field: np.ndarray, iso: float = 0.0, lo: float = -1.0, hi: float = 1.0) -> Mesh:
    """Triangulate the ``iso`` level set of a scalar lattice over ``[lo, hi]^3``.

    ``field[i, j, k]`` is the value at ``lo + (i, j, k) * spacing``.  Vertices
    are shared between neighbouring cells (one per crossed lattice edge), so a
    closed level set yields a closed mesh.  Faces are wound so their normals
    point towards increasing field values.  A field without a sign change gives
    an empty :class:`Mesh`.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 2:
        raise ValueError(f"field must be a 3-D lattice, got shape {f.shape}")
    if not np.isfinite(f).all():
        raise ValueError("field contains non-finite values")
    nx, ny, nz = f.shape
    below = f < iso
    cells = np.array(f.shape) - 1

    case = np.zeros(tuple(cells), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:dx + cells[0], dy:dy + cells[1], dz:dz + cells[2]].astype(np.int64) << c
    active = np.nonzero((case != 0) & (case != 255))
    if len(active[0]) == 0:
        return Mesh()
    cell_case = case[active]
    cell_idx = np.stack(active, axis=-1)  # (A, 3)

    counts = _TRI_COUNT[cell_case]
    owner = np.repeat(np.arange(len(cell_case)), counts)
    slot = np.arange(len(owner)) - np.repeat(np.cumsum(counts) - counts, counts)
    edge = _TRI[cell_case[owner], slot]  # cube-local edge number per triangle corner

    # Global edge key: lattice start vertex of the edge plus its axis.
    a_corner = _EDGES[edge, 0]
    b_corner = _EDGES[edge, 1]
    pa = cell_idx[owner] + _CORNERS[a_corner]
    pb = cell_idx[owner] + _CORNERS[b_corner]
    start = np.minimum(pa, pb)
    axis = np.argmax(np.abs(pb - pa), axis=-1)
    key = ((start[:, 0] * ny + start[:, 1]) * nz + start[:, 2]) * 3 + axis
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)

    ua, ub = pa[first], pb[first]
    va = f[ua[:, 0], ua[:, 1], ua[:, 2]]
    vb = f[ub[:, 0], ub[:, 1], ub[:, 2]]
    t = (iso - va) / (vb - va)
    spacing = (np.array([hi - lo] * 3)) / cells
    pos = lo + (ua + t[:, None] * (ub - ua)) * spacing

    faces = inverse.reshape(-1, 3)
    # The table winds faces clockwise seen from the low side; flip to point outward.
    faces = faces[:, ::-1]
    return _weld(pos, faces)


def _weld(vertices: np.ndarray, faces: np.ndarray) -> Mesh:
    """Merge coincident vertices and drop faces that collapse as a result."""
    uniq, inverse = np.unique(vertices, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    used = np.unique(faces)
    remap = np.full(len(uniq), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(uniq[used], remap[faces])


def mesh_sample_points(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points spread uniformly by area over the mesh surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.faces[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)
