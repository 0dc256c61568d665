"""Pinhole camera, depth rasterization, backprojection, plane RANSAC and free space."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from numpy.typing import NDArray

from . import kernels
from .geometry import PointCloud, Sim3, TriangleMesh, sim3_apply, sim3_inverse

ZNEAR = 1e-6
DEFAULT_MARGIN = 0.005
DEFAULT_CAP = 0.01
DEFAULT_EDGE_PX = 2


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (int(self.width) > 0 and int(self.height) > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.height), int(self.width))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": int(self.width), "height": int(self.height)}


@dataclass(frozen=True)
class Plane:
    """Signed distance ``normal . x - offset``; positive on the camera side."""

    normal: NDArray
    offset: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        n = n / norm
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, pts: NDArray) -> NDArray:
        return np.asarray(pts, dtype=np.float64) @ self.normal - self.offset


def valid_depth(depth: NDArray) -> NDArray:
    return np.isfinite(depth) & (depth > 0)


def backproject(depth: NDArray, camera: PinholeCamera, mask: NDArray | None = None,
                label: int | None = None) -> PointCloud:
    """Camera-frame points of valid pixels (optionally restricted to ``mask == label``)."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != camera.shape:
        raise ValueError(f"depth shape {depth.shape} does not match camera {camera.shape}")
    keep = valid_depth(depth)
    if mask is not None:
        if mask.shape != depth.shape:
            raise ValueError("mask and depth dimensions differ")
        keep &= mask == label
    v, u = np.nonzero(keep)
    d = depth[v, u]
    return np.stack([d * (u - camera.cx) / camera.fx, d * (v - camera.cy) / camera.fy, d], axis=1)


def render_depth_and_faces(mesh: TriangleMesh, object_to_camera: Sim3,
                           camera: PinholeCamera) -> tuple[NDArray, NDArray]:
    h, w = camera.shape
    if mesh.is_empty:
        return np.full((h, w), np.inf), np.full((h, w), -1, dtype=np.int64)
    vcam = np.ascontiguousarray(sim3_apply(object_to_camera, mesh.vertices))
    return kernels.rasterize(vcam, np.ascontiguousarray(mesh.faces), float(camera.fx),
                             float(camera.fy), float(camera.cx), float(camera.cy), w, h, ZNEAR)


def render_depth(mesh: TriangleMesh, object_to_camera: Sim3, camera: PinholeCamera) -> NDArray:
    """Z-buffered depth; uncovered pixels are ``inf`` (invalid)."""
    return render_depth_and_faces(mesh, object_to_camera, camera)[0]


def render_scene(meshes: list[TriangleMesh], objects_to_camera: list[Sim3],
                 camera: PinholeCamera) -> tuple[NDArray, NDArray]:
    """Depth plus a label image (k = object k, 1-based; 0 = uncovered)."""
    verts, faces, owner, off = [], [], [], 0
    for k, (m, T) in enumerate(zip(meshes, objects_to_camera)):
        verts.append(sim3_apply(T, m.vertices))
        faces.append(m.faces + off)
        owner.append(np.full(len(m.faces), k + 1, dtype=np.int64))
        off += len(m.vertices)
    h, w = camera.shape
    if not faces:
        return np.full((h, w), np.inf), np.zeros((h, w), dtype=np.int64)
    depth, fid = kernels.rasterize(np.ascontiguousarray(np.concatenate(verts)),
                                   np.ascontiguousarray(np.concatenate(faces)),
                                   float(camera.fx), float(camera.fy), float(camera.cx),
                                   float(camera.cy), w, h, ZNEAR)
    owner_all = np.concatenate([[0], np.concatenate(owner)])
    return depth, owner_all[fid + 1]


def render_plane(plane: Plane, camera: PinholeCamera) -> NDArray:
    """Depth of an infinite plane along each pixel ray (``inf`` where it is not hit)."""
    h, w = camera.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    rays = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], -1)
    denom = rays @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        z = plane.offset / denom
    return np.where((denom != 0) & (z > ZNEAR), z, np.inf)


def _plane_from_triples(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n, axis=-1)
    return n, norm


def fit_plane_ransac(points: PointCloud, iterations: int = 500, inlier_tol: float = 0.008,
                     seed: int = 0) -> Plane:
    """3-point RANSAC, least-squares refit on the inliers, camera side positive."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError("degenerate plane input: fewer than 3 points")
    rng = np.random.default_rng(seed)
    triples = np.stack([rng.choice(len(pts), 3, replace=False) for _ in range(iterations)])
    n, norm = _plane_from_triples(pts[triples[:, 0]], pts[triples[:, 1]], pts[triples[:, 2]])
    scale = np.linalg.norm(pts - pts.mean(0), axis=1).max() + 1e-300
    good = norm > 1e-12 * scale * scale
    if not good.any():
        raise ValueError("degenerate plane input: all samples collinear")
    best_count, best = -1, None
    for s in range(0, iterations, 32):
        sel = np.arange(s, min(s + 32, iterations))
        sel = sel[good[sel]]
        if len(sel) == 0:
            continue
        nn = n[sel] / norm[sel, None]
        off = np.einsum("ij,ij->i", nn, pts[triples[sel, 0]])
        counts = (np.abs(pts @ nn.T - off) <= inlier_tol).sum(axis=0)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best = int(counts[k]), (nn[k], off[k])
    nrm, off = best
    inl = pts[np.abs(pts @ nrm - off) <= inlier_tol]
    if len(inl) >= 3:
        c = inl.mean(0)
        _, sv, vt = np.linalg.svd(inl - c, full_matrices=False)
        if sv[1] > 1e-12 * max(sv[0], 1e-300):
            cand = vt[2]
            nrm = cand if cand @ nrm >= 0 else -cand
            off = float(nrm @ c)
    if -off < 0:
        nrm, off = -nrm, -off
    return Plane(nrm, off)


def free_space_violation(mesh: TriangleMesh, pose: Sim3, camera: PinholeCamera,
                         observed: NDArray, margin: float = DEFAULT_MARGIN,
                         cap: float = DEFAULT_CAP, edge_px: int = DEFAULT_EDGE_PX) -> float:
    """Capped worst ``d_obs - d_render - margin`` over pixels where both are valid."""
    rendered = render_depth(mesh, sim3_inverse(pose), camera)
    return free_space_from_render(rendered, observed, margin, cap, edge_px)


def free_space_from_render(rendered: NDArray, observed: NDArray, margin: float, cap: float,
                           edge_px: int = DEFAULT_EDGE_PX) -> float:
    return free_space_profile(rendered, observed, margin, cap, edge_px)[0]


def nearest_observed(observed: NDArray, edge_px: int) -> NDArray:
    """Closest valid observed depth within ``edge_px`` pixels (Chebyshev)."""
    obs = np.where(valid_depth(observed), observed, np.inf)
    if edge_px <= 0:
        return obs
    return ndimage.minimum_filter(obs, size=2 * edge_px + 1, mode="nearest")


def free_space_profile(rendered: NDArray, observed: NDArray, margin: float, cap: float,
                       edge_px: int = DEFAULT_EDGE_PX) -> tuple[float, float]:
    """Worst and mean capped violation over pixels where both depths are valid.

    The observed depth is taken as the nearest surface within ``edge_px`` pixels, so a
    silhouette that spills one pixel past a depth discontinuity is not counted.
    """
    both = valid_depth(rendered) & valid_depth(observed)
    if not both.any():
        return 0.0, 0.0
    obs = nearest_observed(observed, edge_px)
    viol = np.clip(obs[both] - rendered[both] - margin, 0.0, cap)
    return float(viol.max()), float(viol.mean())


# ---------------------------------------------------------------- file I/O

def write_pfm(path: str | Path, image: NDArray) -> None:
    """Grayscale little-endian PFM; invalid depths are written as 0."""
    img = np.asarray(image, dtype=np.float64)
    img = np.where(valid_depth(img), img, 0.0).astype("<f4")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def _read_header_tokens(fh, count: int) -> list[bytes]:
    tokens: list[bytes] = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise ValueError("truncated image header")
        if line.startswith(b"#"):
            continue
        tokens += line.split()
    return tokens


def read_pfm(path: str | Path) -> NDArray:
    with open(path, "rb") as fh:
        magic, w, h, sc = _read_header_tokens(fh, 4)
        if magic != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM file")
        w, h, sc = int(w), int(h), float(sc)
        dtype = "<f4" if sc < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PFM payload")
    img = data.reshape(h, w)[::-1].astype(np.float64) * abs(sc)
    return np.where(img > 0, img, np.inf)


def write_pgm16(path: str | Path, image: NDArray) -> None:
    img = np.asarray(image)
    if img.min(initial=0) < 0 or img.max(initial=0) > 65535:
        raise ValueError("label image out of 16-bit range")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(img.astype(">u2").tobytes())


def read_pgm16(path: str | Path) -> NDArray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_header_tokens(fh, 4)
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM file")
        w, h, maxval = int(w), int(h), int(maxval)
        dtype = ">u2" if maxval > 255 else "u1"
        size = w * h * (2 if maxval > 255 else 1)
        data = np.frombuffer(fh.read(size), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.int64)
