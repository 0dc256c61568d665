"""Non-penetration, free-space and contact predicates plus penetration depth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .geometry import PointCloud, SdfGrid, Sim3, TriangleMesh, sdf_query, sim3_apply, sim3_inverse
from .model import BodyModel
from .sensing import (
    DEFAULT_CAP,
    DEFAULT_EDGE_PX,
    DEFAULT_MARGIN,
    PinholeCamera,
    Plane,
    free_space_violation,
)

DEFAULT_TOL = 0.005
ENV = 0
FREE = "free"


@dataclass(frozen=True)
class WorldSdf:
    """Camera-frame SDF of the environment plane or of a posed object."""

    plane: Plane | None = None
    grid: SdfGrid | None = None
    pose: Sim3 | None = None

    def __post_init__(self):
        if (self.plane is None) == (self.grid is None):
            raise ValueError("WorldSdf needs exactly one of plane or grid")
        if self.grid is not None and self.pose is None:
            raise ValueError("object WorldSdf needs a pose")

    @staticmethod
    def environment(plane: Plane) -> WorldSdf:
        return WorldSdf(plane=plane)

    @staticmethod
    def body(grid: SdfGrid, pose: Sim3) -> WorldSdf:
        return WorldSdf(grid=grid, pose=pose)

    def __call__(self, y: NDArray) -> NDArray:
        y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
        if self.plane is not None:
            return self.plane.signed_distance(y)
        # local distances shrink by the pose scale when mapped back to the camera frame
        return np.asarray(sdf_query(self.grid, sim3_apply(self.pose, y))) / self.pose.scale


@dataclass
class ConstraintReport:
    min_inter_object: dict[int, float] = field(default_factory=dict)
    min_environment: float = np.inf
    max_free_space_violation: float = 0.0
    mean_free_space_violation: float = 0.0
    min_contact_abs: float = np.inf
    feasible: bool = True
    checked: tuple[str, ...] = ()


def _to_camera(T: Sim3, pts: PointCloud) -> NDArray:
    return sim3_apply(sim3_inverse(T), np.asarray(pts, dtype=np.float64).reshape(-1, 3))


def check_inter_object(sdf_i: SdfGrid, T_i: Sim3, T_j: Sim3, points_j: PointCloud,
                       tol: float = DEFAULT_TOL) -> tuple[float, bool]:
    """Min of object i's camera-frame SDF over object j's points (given in j's frame)."""
    y = _to_camera(T_j, points_j)
    vals = np.asarray(sdf_query(sdf_i, sim3_apply(T_i, y))) / T_i.scale
    m = float(vals.min()) if vals.size else np.inf
    return m, m >= -tol


def check_environment(plane: Plane, T_i: Sim3, points_i: PointCloud,
                      tol: float = DEFAULT_TOL) -> tuple[float, bool]:
    vals = plane.signed_distance(_to_camera(T_i, points_i))
    m = float(vals.min()) if vals.size else np.inf
    return m, m >= -tol


def check_free_space(mesh_i: TriangleMesh, T_i: Sim3, camera: PinholeCamera, observed: NDArray,
                     margin: float = DEFAULT_MARGIN, cap: float = DEFAULT_CAP,
                     tol: float = DEFAULT_TOL,
                     edge_px: int = DEFAULT_EDGE_PX) -> tuple[float, bool]:
    v = free_space_violation(mesh_i, T_i, camera, observed, margin, cap, edge_px)
    return v, v <= tol


def check_contact(points_i: PointCloud, T_i: Sim3, neighbors: list[WorldSdf],
                  delta: float = DEFAULT_TOL) -> tuple[float, bool]:
    """Smallest |SDF| of any neighbor over i's points; one touching neighbor suffices."""
    if not neighbors:
        raise ValueError("no contact candidates")
    y = _to_camera(T_i, points_i)
    m = min(float(np.abs(nb(y)).min()) for nb in neighbors)
    return m, m <= delta


@dataclass(frozen=True)
class SceneState:
    """Posed bodies (1-based object ids) with the environment and observation."""

    bodies: dict[int, BodyModel]
    poses: dict[int, Sim3]
    plane: Plane
    camera: PinholeCamera | None = None
    observed: NDArray | None = None
    margin: float = DEFAULT_MARGIN
    cap: float = DEFAULT_CAP
    edge_px: int = DEFAULT_EDGE_PX


def _object_depth(state: SceneState, i: int, j: int) -> float:
    bi, bj = state.bodies[i], state.bodies[j]
    ti, tj = state.poses[i], state.poses[j]
    a, _ = check_inter_object(bi.sdf, ti, tj, bj.check_points)
    b, _ = check_inter_object(bj.sdf, tj, ti, bi.check_points)
    return max(0.0, -min(a, b))


def penetration_depth(i: int, j, state: SceneState) -> float:
    """Deepest penetration of body i against j in {ENV, FREE, other object id}."""
    if i not in state.bodies:
        raise ValueError(f"unknown object {i}")
    if j == FREE:
        if state.camera is None or state.observed is None:
            raise ValueError("free-space depth needs a camera and observed depth")
        return free_space_violation(state.bodies[i].mesh, state.poses[i], state.camera,
                                    state.observed, state.margin, state.cap, state.edge_px)
    if j == ENV:
        m, _ = check_environment(state.plane, state.poses[i], state.bodies[i].check_points)
        return max(0.0, -m)
    if isinstance(j, (int, np.integer)) and j in state.bodies and j != i:
        return _object_depth(state, i, int(j))
    raise ValueError(f"invalid penetration partner {j!r} for object {i}")
