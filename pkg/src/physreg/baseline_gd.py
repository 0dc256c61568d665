"""Physics-guided gradient-descent refinement, the comparison baseline for the sampler.

Poses are perturbed in tangent coordinates around the camera-frame position of
each mesh's bounding-box center: three rotation components (left-multiplied
exponential on the object-to-camera rotation), three translation components and
one log-scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .geometry import PointCloud, Sim3, sdf_query, sim3_apply, sim3_inverse, so3_exp
from .model import BodyModel
from .objective import ObjectiveConfig, robust_chamfer
from .sensing import PinholeCamera, Plane, backproject, valid_depth

TANGENT_DIM = 7


@dataclass(frozen=True)
class GdConfig:
    alpha: float = 1e4
    tau: float = 1.99
    beta: float = 10.0
    lambda_inter: float = 10.0
    lambda_env: float = 1.0
    lambda_free: float = 1e-10
    steps: int = 200
    step_size: float = 2e-3
    fd_epsilon: float = 1e-4
    chamfer_weight: float = 1.0
    robust_delta: float = 0.05
    max_halvings: int = 5
    free_space_stride: int = 4

    def __post_init__(self):
        for name in ("alpha", "tau", "beta", "lambda_inter", "lambda_env", "lambda_free",
                     "steps", "step_size", "fd_epsilon", "robust_delta", "max_halvings",
                     "free_space_stride"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.chamfer_weight < 0:
            raise ValueError("chamfer_weight must be non-negative")


@dataclass(frozen=True)
class GdScene:
    """Everything the losses read: shapes, per-object observations and the environment."""

    bodies: dict[int, BodyModel]
    points: dict[int, NDArray]
    plane: Plane
    below_plane: NDArray = field(default_factory=lambda: np.zeros((0, 3)))
    free_points: NDArray = field(default_factory=lambda: np.zeros((0, 3)))

    @staticmethod
    def from_observation(bodies: dict[int, BodyModel], depth: NDArray, masks: NDArray,
                         camera: PinholeCamera, plane: Plane,
                         cfg: GdConfig = GdConfig()) -> GdScene:
        pts = {i: backproject(depth, camera, masks, i) for i in bodies}
        allpts = backproject(depth, camera)
        below = allpts[plane.signed_distance(allpts) < 0]
        # free-space samples: every stride-th valid pixel lifted to 90% of its depth
        d = np.where(valid_depth(depth), depth, np.nan)
        sub = np.full(d.shape, np.nan)
        s = cfg.free_space_stride
        sub[::s, ::s] = d[::s, ::s] * 0.9
        free = backproject(np.nan_to_num(sub, nan=0.0), camera)
        return GdScene(bodies, pts, plane, below, free)


def _union_sdf(poses: dict[int, Sim3], scene: GdScene, y: NDArray) -> dict[int, NDArray]:
    """Each object's SDF (camera-frame meters) at camera-frame points ``y``."""
    return {i: np.asarray(sdf_query(scene.bodies[i].sdf, sim3_apply(T, y))).reshape(-1) / T.scale
            for i, T in poses.items()}


def overlap_points(poses: dict[int, Sim3], scene: GdScene) -> NDArray:
    """Camera-frame surface and interior samples lying in some pairwise AABB overlap."""
    ids = sorted(poses)
    pts, boxes = {}, {}
    for i in ids:
        o2c = sim3_inverse(poses[i])
        body = scene.bodies[i]
        pts[i] = sim3_apply(o2c, np.concatenate([body.samples, body.volume_samples]))
        v = sim3_apply(o2c, scene.bodies[i].mesh.vertices)
        boxes[i] = (v.min(0), v.max(0))
    keep = []
    for a in ids:
        inside = np.zeros(len(pts[a]), dtype=bool)
        for b in ids:
            if b == a:
                continue
            lo = np.maximum(boxes[a][0], boxes[b][0])
            hi = np.minimum(boxes[a][1], boxes[b][1])
            if np.any(lo > hi):
                continue
            inside |= np.all((pts[a] >= lo) & (pts[a] <= hi), axis=1)
        keep.append(pts[a][inside])
    return np.concatenate(keep) if keep else np.zeros((0, 3))


def _sigmoid(z: NDArray) -> NDArray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def physics_terms(poses: dict[int, Sim3], scene: GdScene, cfg: GdConfig = GdConfig(),
                  overlap: NDArray | None = None) -> tuple[float, float, float]:
    """Unweighted (inter-object, environment, free-space) losses."""
    bw = overlap_points(poses, scene) if overlap is None else overlap
    inter = 0.0
    if len(bw):
        phi = _union_sdf(poses, scene, bw)
        sig = sum(_sigmoid(-cfg.alpha * v) for v in phi.values())
        inter = float(np.mean(np.maximum(sig - cfg.tau, 0.0)))
    env = 0.0
    if len(scene.below_plane):
        phi = _union_sdf(poses, scene, scene.below_plane)
        env = float(np.mean(sum(np.maximum(-v, 0.0) for v in phi.values())))
    free = 0.0
    if len(scene.free_points) and poses:
        phi = _union_sdf(poses, scene, scene.free_points)
        nearest = np.minimum.reduce(list(phi.values()))
        free = float(np.mean(np.maximum(np.expm1(-cfg.beta * nearest), 0.0)))
    return inter, env, free


def physics_loss(poses: dict[int, Sim3], scene: GdScene, cfg: GdConfig = GdConfig(),
                 overlap: NDArray | None = None) -> float:
    inter, env, free = physics_terms(poses, scene, cfg, overlap)
    return cfg.lambda_inter * inter + cfg.lambda_env * env + cfg.lambda_free * free


def total_loss(poses: dict[int, Sim3], scene: GdScene, cfg: GdConfig = GdConfig(),
               overlap: NDArray | None = None) -> float:
    loss = physics_loss(poses, scene, cfg, overlap)
    if cfg.chamfer_weight > 0:
        for i, T in poses.items():
            pts = scene.points.get(i)
            if pts is not None and len(pts):
                loss += cfg.chamfer_weight * robust_chamfer(
                    pts, T, scene.bodies[i].index, ObjectiveConfig(cfg.robust_delta, True))
    return loss


def retract(T: Sim3, xi: NDArray, center: NDArray) -> Sim3:
    """Apply a tangent step (rotation, translation of ``center``, log-scale) to ``T``."""
    xi = np.asarray(xi, dtype=np.float64).reshape(TANGENT_DIM)
    o2c = sim3_inverse(T)
    p = sim3_apply(o2c, center) + xi[3:6]
    rot = so3_exp(xi[:3]) @ o2c.rotation
    sigma = o2c.scale * float(np.exp(xi[6]))
    return sim3_inverse(Sim3(sigma, rot, p - sigma * (rot @ center)))


def numeric_gradient(poses: dict[int, Sim3], scene: GdScene, cfg: GdConfig = GdConfig(),
                     loss=None, overlap: NDArray | None = None) -> dict[int, NDArray]:
    """Central differences of ``loss`` (default: the combined objective) per object."""
    loss = total_loss if loss is None else loss
    eps = cfg.fd_epsilon
    grads: dict[int, NDArray] = {}
    for i in sorted(poses):
        center = scene.bodies[i].mesh.bbox_center
        g = np.zeros(TANGENT_DIM)
        for k in range(TANGENT_DIM):
            e = np.zeros(TANGENT_DIM)
            e[k] = eps
            hi = dict(poses)
            lo = dict(poses)
            hi[i] = retract(poses[i], e, center)
            lo[i] = retract(poses[i], -e, center)
            g[k] = (loss(hi, scene, cfg, overlap) - loss(lo, scene, cfg, overlap)) / (2 * eps)
        grads[i] = g
    return grads


@dataclass
class GdResult:
    poses: dict[int, Sim3]
    trace: list[float]
    iterations: int
    stop_reason: str


def gd_refine(init_poses: dict[int, Sim3], scene: GdScene,
              cfg: GdConfig = GdConfig()) -> GdResult:
    """Fixed-length steps along the normalized negative gradient with step halving.

    The overlap point set is taken once at the initial poses and kept fixed in
    the camera frame, so every step descends the same function.  A trial that
    raises the loss halves the step and five halvings in a row stop the descent;
    the recorded trace therefore never increases.
    """
    poses = dict(init_poses)
    overlap = overlap_points(poses, scene)
    current = total_loss(poses, scene, cfg, overlap)
    trace = [current]
    step = cfg.step_size
    reason = "max_steps"
    it = 0
    for it in range(1, cfg.steps + 1):
        grads = numeric_gradient(poses, scene, cfg, overlap=overlap)
        norm = float(np.sqrt(sum(float(g @ g) for g in grads.values())))
        if not norm > 0:
            reason = "zero_gradient"
            break
        halvings = 0
        while halvings < cfg.max_halvings:
            trial = {i: retract(poses[i], -step * grads[i] / norm, scene.bodies[i].mesh.bbox_center)
                     for i in poses}
            value = total_loss(trial, scene, cfg, overlap)
            if value <= current:
                break
            step *= 0.5
            halvings += 1
        if halvings == cfg.max_halvings:
            reason = "step_halvings"
            break
        poses, current = trial, value
        trace.append(current)
    return GdResult(poses, trace, it, reason)
