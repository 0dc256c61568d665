"""Pose accuracy (ADD-S), non-penetration (NPS) and plausibility (SPS) metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .constraints import ENV, FREE, SceneState, penetration_depth
from .geometry import PointCloud, Sim3, sdf_query, sim3_apply, sim3_inverse, so3_exp
from .model import BodyModel
from .sensing import Plane

NPS_THRESHOLD = 0.05
AUC_THRESHOLDS = (0.01, 0.02, 0.03)


def add_s(est: Sim3, gt: Sim3, model_points: PointCloud) -> float:
    """Mean distance from each gt-posed model point to the closest est-posed one.

    Poses follow the solver convention (camera to object), so both are inverted
    before being applied to the object-frame model points.
    """
    pts = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("add_s needs at least one model point")
    a = sim3_apply(sim3_inverse(est), pts)
    b = sim3_apply(sim3_inverse(gt), pts)
    d, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(d))


def add_s_auc(values, threshold: float) -> float:
    """Normalized area under accuracy(t) = P(err <= t) for t in [0, threshold]."""
    if not threshold > 0:
        raise ValueError("AUC threshold must be positive")
    errs = np.asarray(values, dtype=np.float64).ravel()
    if errs.size == 0:
        raise ValueError("add_s_auc needs at least one error value")
    # each error contributes the span (e, threshold] where it counts as correct
    return float(np.mean(np.clip(1.0 - errs / threshold, 0.0, 1.0)))


def nps(state: SceneState, gt: dict[int, Sim3], threshold: float = NPS_THRESHOLD,
        adds: dict[int, float] | None = None) -> tuple[dict[int, float], float]:
    """Per-object and mean non-penetration score of the estimates in ``state``.

    Each object averages penetration depth over the environment, free space and
    every other object; neighbors whose own ADD-S exceeds ``threshold`` count as 0
    but still belong to the denominator.
    """
    ids = sorted(state.bodies)
    if adds is None:
        adds = {i: add_s(state.poses[i], gt[i], state.bodies[i].samples) for i in ids}
    per: dict[int, float] = {}
    for i in ids:
        total = penetration_depth(i, ENV, state)
        total += penetration_depth(i, FREE, state) if state.observed is not None else 0.0
        for j in ids:
            if j != i and adds[j] <= threshold:
                total += penetration_depth(i, j, state)
        per[i] = total / (len(ids) + 1)
    return per, float(np.mean([per[i] for i in ids])) if ids else 0.0


# ------------------------------------------------------------------ rollout

@dataclass(frozen=True)
class RolloutConfig:
    steps: int = 20
    dt: float = 1.0 / 240.0
    gravity: float = 9.81
    mass: float = 1.0
    energy_cap: float = 10.0
    k_p: float = 1e4
    k_d: float = 50.0

    def __post_init__(self):
        if self.steps < 1 or not self.dt > 0:
            raise ValueError("rollout needs positive steps and dt")
        if not self.mass > 0:
            raise ValueError("mass must be positive")


@dataclass(frozen=True)
class RigidState:
    """Posed body (camera to object, scale frozen) with camera-frame velocities."""

    pose: Sim3
    linear_velocity: NDArray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        v = np.array(self.linear_velocity, dtype=np.float64).reshape(3)
        w = np.array(self.angular_velocity, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
            raise ValueError("velocities must be finite")
        object.__setattr__(self, "linear_velocity", v)
        object.__setattr__(self, "angular_velocity", w)


def _world_sdf_and_normal(body: BodyModel, pose: Sim3, y: NDArray) -> tuple[NDArray, NDArray]:
    """Camera-frame SDF of a posed body and its central-difference gradient."""
    s = pose.scale
    phi = np.asarray(sdf_query(body.sdf, sim3_apply(pose, y))) / s
    eps = 0.5 * body.sdf.voxel_size / s
    grad = np.empty_like(y)
    for a in range(3):
        e = np.zeros(3)
        e[a] = eps
        hi = np.asarray(sdf_query(body.sdf, sim3_apply(pose, y + e)))
        lo = np.asarray(sdf_query(body.sdf, sim3_apply(pose, y - e)))
        grad[:, a] = (hi - lo) / (2 * eps * s)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    return phi, np.where(norm > 0, grad / np.maximum(norm, 1e-300), 0.0)


def step_rigid(states: list[RigidState], bodies: list[BodyModel], plane: Plane, dt: float,
               cfg: RolloutConfig = RolloutConfig()) -> list[RigidState]:
    """One semi-implicit Euler step with gravity and penalty contact.

    Every surface sample below the plane or inside another body receives a
    spring-damper force along that partner's normal; forces are weighted by
    1/(number of samples in contact), so k_p acts on the mean penetration, and
    accumulate into a force and a torque about the centroid.
    Inertia is the identity, so dw = torque * dt.
    """
    g = -cfg.gravity * plane.normal
    out = []
    for i, (st, body) in enumerate(zip(states, bodies)):
        o2c = sim3_inverse(st.pose)
        y = sim3_apply(o2c, body.samples)
        com = sim3_apply(o2c, body.mesh.volume_centroid())
        phi = plane.signed_distance(y)
        normal = np.broadcast_to(plane.normal, y.shape).copy()
        for j, (other, ob) in enumerate(zip(states, bodies)):
            if j == i:
                continue
            p2, n2 = _world_sdf_and_normal(ob, other.pose, y)
            closer = p2 < phi
            phi = np.where(closer, p2, phi)
            normal[closer] = n2[closer]
        force = cfg.mass * g
        torque = np.zeros(3)
        hit = phi < 0
        if np.any(hit):
            r = y[hit] - com
            vel = st.linear_velocity + np.cross(st.angular_velocity, r)
            n = normal[hit]
            vn = np.einsum("ij,ij->i", vel, n)
            w = 1.0 / int(hit.sum())
            f = w * (cfg.k_p * (-phi[hit]) - cfg.k_d * vn)[:, None] * n
            force = force + f.sum(0)
            torque = np.cross(r, f).sum(0)
        v = st.linear_velocity + dt * force / cfg.mass
        omega = st.angular_velocity + dt * torque
        # integrate the object-to-camera pose about the centroid
        rot = so3_exp(omega * dt) @ o2c.rotation
        new_com = com + dt * v
        sigma = o2c.scale
        trans = new_com - sigma * (rot @ body.mesh.volume_centroid())
        out.append(RigidState(sim3_inverse(Sim3(sigma, rot, trans)), v, omega))
    return out


def kinetic_score(state: RigidState, cfg: RolloutConfig = RolloutConfig()) -> float:
    v, w = state.linear_velocity, state.angular_velocity
    lin = 0.5 * cfg.mass * float(v @ v)
    ang = 0.5 * float(w @ w)
    return min(lin, cfg.energy_cap) + min(ang, cfg.energy_cap)


def sps_rollout(poses: dict[int, Sim3], bodies: dict[int, BodyModel], plane: Plane,
                cfg: RolloutConfig = RolloutConfig()) -> tuple[dict[int, float], float]:
    """Per-object and mean plausibility score after ``cfg.steps`` steps from rest."""
    ids = sorted(poses)
    if not ids:
        return {}, 0.0
    states = [RigidState(poses[i]) for i in ids]
    models = [bodies[i] for i in ids]
    for _ in range(cfg.steps):
        states = step_rigid(states, models, plane, cfg.dt, cfg)
    per = {i: kinetic_score(s, cfg) for i, s in zip(ids, states)}
    return per, float(np.mean(list(per.values())))


# ------------------------------------------------------------------ reports

@dataclass
class MetricsReport:
    scene_id: str
    adds: dict[int, float]
    auc: dict[float, float]
    nps: dict[int, float]
    scene_nps: float
    sps: dict[int, float]
    scene_sps: float
    feasible: dict[int, bool] = field(default_factory=dict)

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["scene_id", "object_id", "adds", "nps", "sps", "feasible"])
        for i in sorted(self.adds):
            w.writerow([self.scene_id, i, repr(self.adds[i]), repr(self.nps[i]),
                        repr(self.sps[i]), int(self.feasible.get(i, True))])
        return buf.getvalue()

    def to_text(self) -> str:
        """``key = value`` lines: scene-level entries first, then ``object.<id>.<metric>``."""
        lines = [f"scene_id = {self.scene_id}",
                 f"objects = {len(self.adds)}",
                 f"adds_mean = {np.mean(list(self.adds.values())):.6g}" if self.adds else "adds_mean = nan"]
        for t in sorted(self.auc):
            lines.append(f"adds_auc_{round(t * 100)}cm = {self.auc[t]:.6g}")
        lines += [f"nps_scene = {self.scene_nps:.6g}", f"sps_scene = {self.scene_sps:.6g}"]
        for i in sorted(self.adds):
            lines += [f"object.{i}.adds = {self.adds[i]:.6g}",
                      f"object.{i}.nps = {self.nps[i]:.6g}",
                      f"object.{i}.sps = {self.sps[i]:.6g}",
                      f"object.{i}.feasible = {str(self.feasible.get(i, True)).lower()}"]
        return "\n".join(lines) + "\n"


def evaluate_scene(scene_id: str, estimates: dict[int, Sim3], gt: dict[int, Sim3],
                   bodies: dict[int, BodyModel], plane: Plane, camera=None,
                   observed: NDArray | None = None, feasible: dict[int, bool] | None = None,
                   rollout: RolloutConfig = RolloutConfig()) -> MetricsReport:
    """Full metric suite for one scene."""
    missing = sorted(set(gt) - set(estimates))
    if missing:
        raise ValueError(f"no estimate for objects {missing}")
    adds = {i: add_s(estimates[i], gt[i], bodies[i].samples) for i in sorted(gt)}
    auc = {t: add_s_auc(list(adds.values()), t) for t in AUC_THRESHOLDS}
    state = SceneState({i: bodies[i] for i in gt}, {i: estimates[i] for i in gt}, plane,
                       camera, observed)
    per_nps, scene_nps = nps(state, gt, adds=adds)
    per_sps, scene_sps = sps_rollout({i: estimates[i] for i in gt}, bodies, plane, rollout)
    return MetricsReport(scene_id, adds, auc, per_nps, scene_nps, per_sps, scene_sps,
                         dict(feasible or {}))


__all__ = ["add_s", "add_s_auc", "nps", "RolloutConfig", "RigidState", "step_rigid",
           "kinetic_score", "sps_rollout", "MetricsReport", "evaluate_scene"]
