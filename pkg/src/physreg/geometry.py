"""Similarity transforms, triangle meshes, surface sampling, SDF grids and NN search.

Convention: a ``Sim3`` maps camera-frame points to the object frame,
``x_obj = s * R @ x_cam + t``.  Files store the inverse (object to camera).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import kernels

PointCloud = NDArray[np.float64]  # (n, 3)

ORTHO_TOL = 1e-9


# ------------------------------------------------------------------- SO(3)

def so3_exp(omega: NDArray) -> NDArray:
    """Rotation matrices from axis-angle vectors, shape (..., 3) -> (..., 3, 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    flat = omega.reshape(-1, 3)
    mats = Rotation.from_rotvec(flat).as_matrix()
    return mats.reshape(omega.shape[:-1] + (3, 3))


def so3_log(rot: NDArray) -> NDArray:
    rot = np.asarray(rot, dtype=np.float64)
    return Rotation.from_matrix(rot.reshape(-1, 3, 3)).as_rotvec().reshape(rot.shape[:-2] + (3,))


def rotation_angle(rot: NDArray) -> NDArray | float:
    """Geodesic angle in radians from the trace, clipped for round-off."""
    rot = np.asarray(rot, dtype=np.float64)
    tr = np.trace(rot, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def project_to_so3(m: NDArray) -> NDArray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


# ------------------------------------------------------------------- Sim(3)

@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: NDArray
    translation: NDArray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform component")

    @staticmethod
    def identity() -> Sim3:
        return Sim3(1.0, np.eye(3), np.zeros(3))

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.rotation
        return (
            np.linalg.norm(r.T @ r - np.eye(3)) <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
            and self.scale > 0
        )

    def apply(self, pts: NDArray) -> NDArray:
        return sim3_apply(self, pts)

    def compose(self, other: Sim3) -> Sim3:
        return sim3_compose(self, other)

    def inverse(self) -> Sim3:
        return sim3_inverse(self)

    def matrix(self) -> NDArray:
        """Homogeneous 4x4 ``[sR | t]``."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: NDArray) -> Sim3:
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        a = m[:3, :3]
        det = np.linalg.det(a)
        if not det > 0:
            raise ValueError("similarity block must have positive determinant")
        s = det ** (1.0 / 3.0)
        return Sim3(s, project_to_so3(a / s), m[:3, 3])

    def allclose(self, other: Sim3, tol: float = 1e-9) -> bool:
        return (
            abs(self.scale - other.scale) <= tol
            and np.allclose(self.rotation, other.rotation, atol=tol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=tol, rtol=0)
        )


def sim3_compose(a: Sim3, b: Sim3) -> Sim3:
    """``(a o b)(x) = a(b(x))``."""
    return Sim3(
        a.scale * b.scale,
        a.rotation @ b.rotation,
        a.scale * (a.rotation @ b.translation) + a.translation,
    )


def sim3_inverse(a: Sim3) -> Sim3:
    rt = a.rotation.T
    return Sim3(1.0 / a.scale, rt, -(1.0 / a.scale) * (rt @ a.translation))


def sim3_apply(T: Sim3, p: NDArray) -> NDArray:
    """``s R p + t`` for a single point (3,) or a batch (n, 3)."""
    p = np.asarray(p, dtype=np.float64)
    return T.scale * (p @ T.rotation.T) + T.translation


# -------------------------------------------------------------------- meshes

@dataclass(frozen=True)
class TriangleMesh:
    vertices: NDArray
    faces: NDArray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex coordinates")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if len(f):
            tri = v[f]
            area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            f = f[area2 > 1e-14]
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def bounds(self) -> tuple[NDArray, NDArray]:
        used = self.vertices[np.unique(self.faces)] if len(self.faces) else self.vertices
        return used.min(axis=0), used.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    @property
    def bbox_center(self) -> NDArray:
        lo, hi = self.bounds()
        return 0.5 * (lo + hi)

    def face_areas(self) -> NDArray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def volume_centroid(self) -> NDArray:
        """Centroid of the enclosed volume (falls back to area centroid if ill-posed)."""
        tri = self.vertices[self.faces]
        vol6 = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
        total = vol6.sum()
        if abs(total) < 1e-15:
            w = self.face_areas()
            return (tri.mean(axis=1) * w[:, None]).sum(0) / w.sum()
        return (tri.sum(axis=1) * vol6[:, None]).sum(0) / (4.0 * total)

    def is_watertight(self) -> bool:
        """Every undirected edge shared by exactly two faces."""
        if self.is_empty:
            return False
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def transformed(self, T: Sim3) -> TriangleMesh:
        return TriangleMesh(sim3_apply(T, self.vertices), self.faces)


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    if not verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def load_obj(path: str | Path) -> TriangleMesh:
    """ASCII Wavefront OBJ: ``v`` and ``f`` records, polygons fan-triangulated."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    path = Path(path)
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    for a in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[a], idx[a + 1]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {line.strip()!r}") from exc
    if any(len(v) != 3 for v in verts):
        raise ValueError(f"{path}: vertex with fewer than 3 coordinates")
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def sample_surface_points(mesh: TriangleMesh, count: int, seed: int) -> PointCloud:
    """Area-weighted uniform samples on the surface."""
    if mesh.is_empty:
        raise ValueError("empty shape")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    tri_idx = np.minimum(np.searchsorted(cdf, rng.random(count), side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.vertices[mesh.faces[tri_idx]]
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]


# --------------------------------------------------------------------- SDFs

@dataclass(frozen=True)
class SdfGrid:
    """Node-sampled signed distance; node (i,j,k) sits at ``origin + h*(i,j,k)``."""

    origin: NDArray
    voxel_size: float
    values: NDArray
    watertight: bool = True

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 2:
            raise ValueError("SDF grid needs at least 2 nodes per axis")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        o = np.ascontiguousarray(self.origin, dtype=np.float64).reshape(3)
        v.setflags(write=False)
        o.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]

    @property
    def upper(self) -> NDArray:
        return self.origin + (np.array(self.dims) - 1) * self.voxel_size

    def node(self, i: int, j: int, k: int) -> NDArray:
        return self.origin + self.voxel_size * np.array([i, j, k], dtype=np.float64)

    def query(self, pts: NDArray) -> NDArray | float:
        return sdf_query(self, pts)


def sdf_query(grid: SdfGrid, p: NDArray) -> NDArray | float:
    """Trilinear inside the grid; outside, distance to the box plus the clamped value."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.ascontiguousarray(p.reshape(-1, 3))
    out = kernels.sdf_query(grid.values, grid.origin, grid.voxel_size, pts)
    return float(out[0]) if single else out


_JITTER = (3.7e-4, 1.9e-4)


def build_sdf_grid(mesh: TriangleMesh, voxel_size: float | None = None,
                   padding: float | None = None) -> SdfGrid:
    """Signed distance at grid nodes; sign from a 3-axis ray parity majority vote."""
    if mesh.is_empty:
        raise ValueError("empty shape")
    h = float(voxel_size) if voxel_size is not None else mesh.diagonal / 64.0
    if not h > 0:
        raise ValueError("voxel_size must be positive")
    pad = float(padding) if padding is not None else 4.0 * h
    lo, hi = mesh.bounds()
    lo = lo - pad
    hi = hi + pad
    dims = tuple(int(d) for d in np.maximum(np.ceil((hi - lo) / h - 1e-9).astype(int) + 1, 2))
    axes = [lo[a] + h * np.arange(dims[a]) for a in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    verts = np.ascontiguousarray(mesh.vertices)
    faces = np.ascontiguousarray(mesh.faces)
    dist = kernels.mesh_distance(verts, faces, np.ascontiguousarray(nodes)).reshape(dims)
    votes = np.zeros(dims, dtype=np.int32)
    origin = np.ascontiguousarray(lo)
    for axis in range(3):
        jb, jc = _JITTER[0] * h, _JITTER[1] * h
        votes += kernels.ray_parity(verts, faces, origin, h, dims, axis, jb, jc)
    inside = votes >= 2
    watertight = mesh.is_watertight()
    if not watertight:
        warnings.warn("mesh is not watertight; SDF sign comes from ray-parity voting only",
                      RuntimeWarning, stacklevel=2)
    return SdfGrid(origin, h, np.where(inside, -dist, dist), watertight)


# ------------------------------------------------------------- NN indexing

@dataclass(frozen=True)
class SpatialIndex:
    points: NDArray
    _tree: cKDTree = field(repr=False, compare=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("spatial index needs at least one point")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_tree", cKDTree(pts))

    def query(self, q: NDArray) -> tuple[NDArray, NDArray]:
        """Nearest index and exact squared distance for each row of ``q``."""
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        _, idx = self._tree.query(q, k=1)
        diff = q - self.points[idx]
        return idx.astype(np.int64), np.einsum("ij,ij->i", diff, diff)


def nearest(index: SpatialIndex, q: NDArray) -> tuple[int, float]:
    idx, d2 = index.query(np.asarray(q).reshape(1, 3))
    return int(idx[0]), float(d2[0])
