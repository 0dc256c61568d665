"""Watertight primitive meshes centered on their bounding boxes."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

from .geometry import TriangleMesh


def _outward(verts: NDArray, faces: NDArray) -> TriangleMesh:
    tri = verts[faces]
    vol6 = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
    if vol6 < 0:
        faces = faces[:, ::-1]
    return TriangleMesh(verts, faces)


def box_mesh(size) -> TriangleMesh:
    sx, sy, sz = (float(v) / 2.0 for v in np.broadcast_to(np.asarray(size, dtype=float), (3,)))
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    # vertex id = 4*ix + 2*iy + iz
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return _outward(v, np.array(f))


def lathe_mesh(profile: NDArray, segments: int = 32) -> TriangleMesh:
    """Revolve an (r, z) polyline about z; both endpoints must lie on the axis."""
    profile = np.asarray(profile, dtype=float)
    if profile[0, 0] != 0 or profile[-1, 0] != 0:
        raise ValueError("lathe profile must start and end on the axis")
    ring = profile[1:-1]
    ang = 2 * np.pi * np.arange(segments) / segments
    verts = [[0.0, 0.0, profile[0, 1]]]
    for r, z in ring:
        verts += [[r * np.cos(a), r * np.sin(a), z] for a in ang]
    verts.append([0.0, 0.0, profile[-1, 1]])
    verts = np.array(verts)
    top = len(verts) - 1
    faces = []
    nring = len(ring)

    def vid(i, k):
        return 1 + i * segments + (k % segments)

    for k in range(segments):
        faces.append((0, vid(0, k + 1), vid(0, k)))
    for i in range(nring - 1):
        for k in range(segments):
            a, b = vid(i, k), vid(i, k + 1)
            c, d = vid(i + 1, k + 1), vid(i + 1, k)
            faces += [(a, b, c), (a, c, d)]
    for k in range(segments):
        faces.append((top, vid(nring - 1, k), vid(nring - 1, k + 1)))
    mesh = _outward(verts, np.array(faces))
    return recenter(mesh)


def cylinder_mesh(radius: float, height: float, segments: int = 32) -> TriangleMesh:
    h = height / 2.0
    prof = np.array([[0, -h], [radius, -h], [radius, h], [0, h]])
    return lathe_mesh(prof, segments)


def bowl_mesh(radius: float, height: float, wall: float, segments: int = 32,
              rings: int = 6) -> TriangleMesh:
    """Thick-walled bowl: a flat foot, curved outer wall, and a concave interior."""
    t = np.linspace(0.0, 1.0, rings + 1)
    outer = np.stack([radius * (0.45 + 0.55 * np.sin(0.5 * np.pi * t)), height * t], axis=1)
    inner = outer[::-1].copy()
    inner[:, 0] = np.maximum(inner[:, 0] - wall, 0.0)
    inner[:, 1] = np.maximum(inner[:, 1], wall)
    inner = inner[inner[:, 0] > 0]
    prof = np.concatenate([[[0.0, 0.0]], outer, inner, [[0.0, wall]]])
    return lathe_mesh(prof, segments)


def icosphere(radius: float = 1.0, subdivisions: int = 3) -> TriangleMesh:
    p = (1 + 5 ** 0.5) / 2
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p], [0, -1, -p],
         [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(x, dtype=float) / np.linalg.norm(x) for x in v]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return _outward(np.array(verts) * radius, np.array(f))


def recenter(mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(mesh.vertices - mesh.bbox_center, mesh.faces)


def make_primitive(kind: str, dims) -> TriangleMesh:
    dims = [float(d) for d in np.atleast_1d(dims)]
    if kind == "box":
        return box_mesh(dims if len(dims) == 3 else dims * 3)
    if kind == "cylinder":
        return cylinder_mesh(dims[0], dims[1])
    if kind == "bowl":
        return bowl_mesh(dims[0], dims[1], dims[2] if len(dims) > 2 else 0.1 * dims[0])
    if kind == "sphere":
        return icosphere(dims[0], 3)
    raise ValueError(f"unknown primitive {kind!r}")
