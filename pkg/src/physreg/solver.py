"""Coarse-to-fine rejection sampling over Sim(3) with greedy DAG rollout.

Candidates are parameterized as (sigma, R, p): ``sigma`` is the object-to-camera
scale, ``R`` the camera-to-object rotation and ``p`` the camera-frame position of
the mesh bounding-box center ``c``.  The camera-to-object transform is then
``s = 1/sigma``, ``R``, ``t = c - s R p``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
import time
from dataclasses import dataclass, field, fields

import numpy as np
from numpy.typing import NDArray
from scipy.stats import qmc

from . import kernels
from .constraints import (
    ConstraintReport,
    WorldSdf,
    check_contact,
    check_environment,
    check_inter_object,
)
from .geometry import PointCloud, Sim3, TriangleMesh, so3_exp, sim3_inverse
from .model import BodyModel
from .objective import ObjectiveConfig, robust_chamfer
from .scene_graph import DagOrder
from .sensing import (
    PinholeCamera,
    Plane,
    backproject,
    fit_plane_ransac,
    free_space_profile,
    render_depth,
    valid_depth,
)

@dataclass(frozen=True)
class SamplerConfig:
    rng_seed: int = 0
    scale_levels: int = 3
    scale_range: tuple[float, float] = (0.5, 1.1)
    scale_samples_per_level: int = 5
    global_rotations: int = 1024
    rotation_schedule: tuple[tuple[float, float], ...] = ((30.0, 6.0), (6.0, 2.0), (3.0, 2.0))
    translation_level1_grid: int = 20
    translation_level1_range: tuple[float, float] = (-0.5, 0.5)
    translation_fine_samples: int = 5
    translation_spacing: tuple[float, ...] = (0.05, 0.01, 0.005)
    seeds_per_level: int = 4
    rejection_buffer: int = 16
    seed_pool: int = 64
    seed_nms_rotation_deg: float = 30.0
    seed_nms_translation: float = 0.02
    excess_weight: float = 1.0
    score_points: int = 64
    level1_points: int = 32
    robust_delta: float = 0.05
    contact_delta: float = 0.005
    inter_object_tol: float = 0.002
    environment_tol: float = 0.002
    free_space_tol: float = 0.005
    free_space_margin: float = 0.005
    free_space_cap: float = 0.01
    free_space_edge_px: int = 2
    use_physics: bool = True
    jobs: int = 1

    def __post_init__(self):
        if self.scale_levels < 1 or self.scale_samples_per_level < 1:
            raise ValueError("scale schedule counts must be positive")
        if self.global_rotations < 1 or self.translation_level1_grid < 1:
            raise ValueError("level-1 counts must be positive")
        if len(self.translation_spacing) != len(self.rotation_schedule):
            raise ValueError("one translation spacing per local rotation level")
        if any(b >= a for a, b in zip(self.translation_spacing, self.translation_spacing[1:])):
            raise ValueError("translation spacing must decrease")
        if self.rejection_buffer < 1 or self.seeds_per_level < 1:
            raise ValueError("rejection buffer and seeds must be at least 1")
        for tmax, tstep in self.rotation_schedule:
            if not (tmax >= tstep > 0):
                raise ValueError("rotation levels need theta_max >= theta_step > 0")

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.robust_delta, True)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------- sampling grids

def sample_rotations_global(n: int, seed: int = 0) -> NDArray:
    """Scrambled Sobol points mapped to unit quaternions (uniform on SO(3))."""
    if n < 1:
        raise ValueError("need at least one rotation")
    sob = qmc.Sobol(d=3, scramble=True, seed=seed)
    m = int(math.ceil(math.log2(n)))
    u = sob.random_base2(m)[:n]
    u1, u2, u3 = u[:, 0], 2 * np.pi * u[:, 1], 2 * np.pi * u[:, 2]
    a, b = np.sqrt(1 - u1), np.sqrt(u1)
    x, y, z, w = a * np.sin(u2), a * np.cos(u2), b * np.sin(u3), b * np.cos(u3)
    return _quat_to_matrix(np.stack([w, x, y, z], 1))


def _quat_to_matrix(q: NDArray) -> NDArray:
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


def lattice_ball(theta_max: float, theta_step: float) -> NDArray:
    """Integer vectors k with ``|k| * step <= max`` (degrees), ordered with k = 0 first."""
    r = int(math.floor(theta_max / theta_step + 1e-9))
    rng = np.arange(-r, r + 1)
    k = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
    keep = np.linalg.norm(k * theta_step, axis=1) <= theta_max * (1 + 1e-12)
    k = k[keep]
    order = np.lexsort((k[:, 2], k[:, 1], k[:, 0], np.abs(k).sum(1)))
    return k[order]


def sample_rotations_local(seed_rotation: NDArray, theta_max: float, theta_step: float) -> NDArray:
    """``seed @ exp(k * step)`` for every lattice vector inside the ball."""
    if not (theta_max >= theta_step > 0):
        raise ValueError("need theta_max >= theta_step > 0")
    k = lattice_ball(theta_max, theta_step)
    return np.asarray(seed_rotation) @ so3_exp(np.radians(theta_step) * k.astype(np.float64))


def translation_offsets(level: int, cfg: SamplerConfig = SamplerConfig()) -> NDArray:
    """Level 1: normalized grid in [-0.5, 0.5]^3; levels 2-4: metric offsets."""
    if level == 1:
        g = np.linspace(*cfg.translation_level1_range, cfg.translation_level1_grid)
    elif 2 <= level <= len(cfg.translation_spacing) + 1:
        half = cfg.translation_fine_samples // 2
        g = np.arange(-half, half + 1) * cfg.translation_spacing[level - 2]
    else:
        raise ValueError(f"translation level {level} out of range")
    off = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    # nearest-to-center first so good candidates tighten pruning early
    order = np.lexsort((np.arange(len(off)), np.round(np.linalg.norm(off, axis=1), 12)))
    return np.ascontiguousarray(off[order])


def sample_translations(level: int, center: NDArray, shape_scale: float = 1.0,
                        cfg: SamplerConfig = SamplerConfig()) -> NDArray:
    """Camera-frame translations; level 1 offsets are scaled by ``shape_scale``."""
    off = translation_offsets(level, cfg)
    if level == 1:
        off = off * shape_scale
    return np.asarray(center, dtype=np.float64) + off


# ------------------------------------------------------------ initialization

@dataclass(frozen=True)
class InitResult:
    t0: NDArray
    s0: float
    trimmed: bool = True


def init_pose(masked_points: PointCloud, rough_pose: Sim3, shape: TriangleMesh,
              camera: PinholeCamera) -> InitResult:
    """Trimmed mean position and depth-ratio scale (object-to-camera size factor)."""
    pts = np.asarray(masked_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no observed points for object")
    z = pts[:, 2]
    lo, hi = np.percentile(z, [5, 95])
    keep = (z >= lo) & (z <= hi)
    trimmed = bool(keep.any())
    kept = pts[keep] if trimmed else pts
    t0 = kept.mean(axis=0)
    rough_size = 1.0 / rough_pose.scale
    rendered = render_depth(shape, sim3_inverse(rough_pose), camera)
    ok = valid_depth(rendered)
    ratio = float(kept[:, 2].mean() / rendered[ok].mean()) if ok.any() else 1.0
    return InitResult(t0, rough_size * ratio, trimmed)


# ------------------------------------------------------------------ results

@dataclass
class Candidate:
    transform: Sim3
    score: float
    constraint_report: ConstraintReport | None = None


@dataclass
class ObjectResult:
    object_id: int
    transform: Sim3
    score: float
    feasible: bool
    shape_index: int = 0
    evaluated: dict[str, int] = field(default_factory=dict)
    rejected: int = 0
    flags: tuple[str, ...] = ()
    report: ConstraintReport | None = None
    seconds: float = 0.0


@dataclass
class SolveResult:
    objects: list[ObjectResult]
    order: tuple[int, ...]

    def poses(self) -> dict[int, Sim3]:
        return {o.object_id: o.transform for o in self.objects}


@dataclass(frozen=True)
class ParentState:
    """A solved (or fixed) neighbor: its body and camera-to-object pose."""

    body: BodyModel
    pose: Sim3


@dataclass(frozen=True)
class ObjectProblem:
    object_id: int
    measured: PointCloud
    rough_pose: Sim3
    camera: PinholeCamera
    observed: NDArray
    plane: Plane
    parents: frozenset[int] = frozenset({0})
    parent_states: dict[int, ParentState] = field(default_factory=dict)


# ------------------------------------------------------------- SE(3) search

@dataclass
class _Context:
    body: BodyModel
    sub: NDArray          # scoring subset of measured points (camera frame)
    sub1: NDArray         # smaller subset used for the level-1 sweep
    center: NDArray       # bbox center c (object frame)
    t0: NDArray
    r_prior: NDArray      # camera-to-object rotation of the rough pose
    globals_: NDArray
    cfg: SamplerConfig
    pool: ThreadPoolExecutor | None
    counts: dict[str, int] = field(default_factory=dict)


def _to_sim3(sigma: float, rot: NDArray, p: NDArray, center: NDArray) -> Sim3:
    s = 1.0 / sigma
    return Sim3(s, rot, center - s * (rot @ p))


WARM_OFFSETS = 125


def _topk_pass(ctx, base, srot, trans, k, init_thr):
    """Chunked sweep; each wave of chunks starts from the k-th best found so far.

    Every chunk's top-k is exact given its starting bound, so the merged result does
    not depend on how many workers run a wave.
    """
    g = ctx.body.sdf
    nr, nt = len(base), len(trans)
    chunk = max(1, -(-nr // 16))
    starts = list(range(0, nr, chunk))
    wave = ctx.cfg.jobs if ctx.pool is not None else 1
    sums = np.empty(0)
    ids = np.empty(0, dtype=np.int64)
    thr = init_thr

    def run(a: int, bound: float):
        b = min(nr, a + chunk)
        return kernels.score_topk(g.values, g.origin, g.voxel_size, base[a:b], srot[a:b], trans,
                                  ctx.cfg.robust_delta, k, a, bound)

    for w in range(0, len(starts), wave):
        group = starts[w:w + wave]
        if ctx.pool is not None and len(group) > 1:
            parts = list(ctx.pool.map(run, group, [thr] * len(group)))
        else:
            parts = [run(a, thr) for a in group]
        sums = np.concatenate([sums] + [p[0] for p in parts])
        ids = np.concatenate([ids] + [p[1] for p in parts])
        order = np.lexsort((ids, sums))[:k]
        sums, ids = sums[order], ids[order]
        if len(sums) == k:
            thr = min(thr, float(sums[-1]))
    return sums, ids // nt, ids % nt


def _topk(ctx: _Context, sigma: float, rots: NDArray, trans: NDArray, k: int, label: str,
          pts: NDArray | None = None):
    """Exact top-k (sum, rotation index, translation index) over rotations x translations.

    Large translation sets are scored in two passes: the offsets nearest the center
    first, whose k-th best sum then bounds the second pass.  Ties resolve by the flat
    index ``r * n_trans + t`` exactly as a single sweep would.
    """
    s = 1.0 / sigma
    srot = np.ascontiguousarray(s * rots)
    pts = ctx.sub if pts is None else pts
    base = np.ascontiguousarray(np.einsum("rij,nj->rni", srot, pts) + ctx.center)
    trans = np.ascontiguousarray(trans)
    nr, nt = len(rots), len(trans)
    ctx.counts[label] = ctx.counts.get(label, 0) + nr * nt
    if nt > 2 * WARM_OFFSETS:
        sa, ra, ta = _topk_pass(ctx, base, srot, trans[:WARM_OFFSETS], k, np.inf)
        thr = sa.max() if len(sa) == k else np.inf
        sb, rb, tb = _topk_pass(ctx, base, srot, np.ascontiguousarray(trans[WARM_OFFSETS:]), k, thr)
        sums = np.concatenate([sa, sb])
        ri = np.concatenate([ra, rb])
        ti = np.concatenate([ta, tb + WARM_OFFSETS])
    else:
        sums, ri, ti = _topk_pass(ctx, base, srot, trans, k, np.inf)
    order = np.lexsort((ri * nt + ti, sums))[:k]
    return sums[order], ri[order], ti[order]


def _angle_between(a: NDArray, b: NDArray) -> float:
    c = (np.trace(a.T @ b) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def _se3_search(ctx: _Context, sigma: float):
    """Levels 1-4 for one scale; returns the best sum and the final candidate pool."""
    cfg = ctx.cfg
    rots = ctx.r_prior @ ctx.globals_
    extent = ctx.body.mesh.diagonal * sigma
    k_pool = max(cfg.seed_pool, cfg.seeds_per_level)
    trans = ctx.t0 + translation_offsets(1, cfg) * extent
    sums, ri, ti = _topk(ctx, sigma, rots, trans, k_pool, "level1", ctx.sub1)
    seeds: list[tuple[float, NDArray, NDArray]] = []
    for s_, r_, t_ in zip(sums, ri, ti):
        rot, p = rots[r_], trans[t_]
        close = any(_angle_between(rot, q) < cfg.seed_nms_rotation_deg
                    and np.linalg.norm(p - pp) < cfg.seed_nms_translation for _, q, pp in seeds)
        if not close:
            seeds.append((float(s_), rot, p))
        if len(seeds) == cfg.seeds_per_level:
            break
    n_levels = len(cfg.rotation_schedule)
    per_chain = max(1, -(-cfg.rejection_buffer // len(seeds)))
    final: list[tuple[float, int, NDArray, NDArray]] = []
    for chain, (s_, rot, p) in enumerate(seeds):
        for lvl, (tmax, tstep) in enumerate(cfg.rotation_schedule):
            local = sample_rotations_local(rot, tmax, tstep)
            tr = p + translation_offsets(lvl + 2, cfg)
            keep = per_chain if lvl == n_levels - 1 else 1
            sums, ri, ti = _topk(ctx, sigma, local, tr, keep, f"level{lvl + 2}")
            if lvl < n_levels - 1:
                rot, p = local[ri[0]], tr[ti[0]]
            else:
                final += [(float(a), chain, local[b], tr[c]) for a, b, c in zip(sums, ri, ti)]
    final.sort(key=lambda x: (x[0], x[1]))
    return final[0][0], final[: cfg.rejection_buffer]


# -------------------------------------------------------------- constraints

def evaluate_candidate(T: Sim3, body: BodyModel, problem: ObjectProblem,
                       cfg: SamplerConfig) -> ConstraintReport:
    """All decoupled-subproblem checks for one candidate pose."""
    rep = ConstraintReport(checked=("inter_object", "environment", "free_space", "contact"))
    ok = True
    for j in sorted(problem.parents - {0}):
        ps = problem.parent_states.get(j)
        if ps is None:
            continue
        a, _ = check_inter_object(body.sdf, T, ps.pose, ps.body.check_points, cfg.inter_object_tol)
        b, _ = check_inter_object(ps.body.sdf, ps.pose, T, body.check_points, cfg.inter_object_tol)
        rep.min_inter_object[j] = min(a, b)
        ok &= min(a, b) >= -cfg.inter_object_tol
    rep.min_environment, env_ok = check_environment(problem.plane, T, body.check_points,
                                                    cfg.environment_tol)
    ok &= env_ok
    rendered = render_depth(body.mesh, sim3_inverse(T), problem.camera)
    rep.max_free_space_violation, rep.mean_free_space_violation = free_space_profile(
        rendered, problem.observed, cfg.free_space_margin, cfg.free_space_cap,
        cfg.free_space_edge_px)
    ok &= rep.max_free_space_violation <= cfg.free_space_tol
    neighbors = []
    for j in sorted(problem.parents):
        if j == 0:
            neighbors.append(WorldSdf.environment(problem.plane))
        elif j in problem.parent_states:
            ps = problem.parent_states[j]
            neighbors.append(WorldSdf.body(ps.body.sdf, ps.pose))
    if neighbors:
        rep.min_contact_abs, c_ok = check_contact(body.samples, T, neighbors, cfg.contact_delta)
        ok &= c_ok
    rep.feasible = bool(ok)
    return rep


def constraint_excess(rep: ConstraintReport, cfg: SamplerConfig) -> float:
    """Total amount (meters) by which a report exceeds the configured tolerances."""
    e = sum(max(0.0, -m - cfg.inter_object_tol) for m in rep.min_inter_object.values())
    e += max(0.0, -rep.min_environment - cfg.environment_tol)
    if rep.max_free_space_violation > cfg.free_space_tol:
        # the worst pixel saturates at the cap; the mean grades how much sticks out
        e += rep.max_free_space_violation - cfg.free_space_tol + rep.mean_free_space_violation
    if np.isfinite(rep.min_contact_abs):
        e += max(0.0, rep.min_contact_abs - cfg.contact_delta)
    return float(e) if e > 0 or rep.feasible else float(np.nextafter(0.0, 1.0))


# --------------------------------------------------------------- entry points

def _scale_schedule_next(best_m: float, step: float, n: int) -> tuple[NDArray, float]:
    return best_m + np.linspace(-step, step, n), 2 * step / max(n - 1, 1)


def _extremal_first(pts: NDArray) -> NDArray:
    # far-from-centroid points move most under a wrong pose, so pruning bites sooner
    d = np.linalg.norm(pts - pts.mean(0), axis=1)
    return np.ascontiguousarray(pts[np.lexsort((np.arange(len(pts)), -d))])


def solve_object(problem: ObjectProblem, body: BodyModel, cfg: SamplerConfig,
                 pool: ThreadPoolExecutor | None = None) -> ObjectResult:
    """Hierarchical scale x SE(3) sampling, then rejection over the top-B buffer."""
    pts = np.asarray(problem.measured, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return ObjectResult(problem.object_id, problem.rough_pose, float("nan"), False,
                            flags=("no_observed_points",))
    init = init_pose(pts, problem.rough_pose, body.mesh, problem.camera)
    rng = np.random.default_rng([cfg.rng_seed, problem.object_id])
    pick = rng.permutation(len(pts))[: min(cfg.score_points, len(pts))]
    sub = _extremal_first(pts[pick])
    sub1 = _extremal_first(pts[pick[: min(cfg.level1_points, len(pick))]])
    r_prior = problem.rough_pose.rotation
    ctx = _Context(body, sub, sub1, body.mesh.bbox_center, init.t0, r_prior,
                   sample_rotations_global(cfg.global_rotations, cfg.rng_seed), cfg, pool)

    ocfg = cfg.objective()
    cache: dict[float, tuple] = {}

    def run(m: float):
        """SE(3) search at one scale, exact rescoring and rejection over its buffer."""
        key = round(float(m), 12)
        if key not in cache:
            sigma = init.s0 * key
            _, buffer = _se3_search(ctx, sigma)
            cands = []
            for _, chain, rot, p in buffer:
                T = _to_sim3(sigma, rot, p, ctx.center)
                cands.append((robust_chamfer(pts, T, body.index, ocfg), chain, T))
            cands.sort(key=lambda c: (c[0], c[1]))
            pick, rejected, report, excess = cands[0], 0, None, 0.0
            if cfg.use_physics:
                excess = np.inf
                for c in cands:
                    rep = evaluate_candidate(c[2], body, problem, cfg)
                    report = report or rep
                    if rep.feasible:
                        pick, report, excess = c, rep, 0.0
                        break
                    excess = min(excess, constraint_excess(rep, cfg))
                    rejected += 1
            feasible = excess == 0.0
            # feasible scales always outrank infeasible ones; excess only orders the latter
            rank = (0, pick[0]) if feasible else (1, pick[0] + cfg.excess_weight * excess)
            cache[key] = (rank, pick[2], pick[0], feasible, rejected, report)
        return cache[key]

    lo, hi = cfg.scale_range
    ms = np.linspace(lo, hi, cfg.scale_samples_per_level)
    step = (hi - lo) / max(cfg.scale_samples_per_level - 1, 1)
    best_m = None
    for level in range(cfg.scale_levels):
        if level > 0:
            ms, step = _scale_schedule_next(best_m, step, cfg.scale_samples_per_level)
        ms = ms[ms > 0]
        keys = [run(m)[0] for m in ms]
        best_m = float(ms[min(range(len(ms)), key=lambda i: keys[i])])

    _, T, score, feasible, rejected, report = run(best_m)
    flags = () if init.trimmed else ("untrimmed_init",)
    if not cfg.use_physics:
        flags += ("physics_skipped",)
    elif not feasible:
        flags += ("all_infeasible",)
    return ObjectResult(problem.object_id, T, score, feasible, evaluated=dict(ctx.counts),
                        rejected=rejected, flags=flags, report=report)


def solve_with_shape_candidates(problem: ObjectProblem, bodies: list[BodyModel],
                                cfg: SamplerConfig,
                                pool: ThreadPoolExecutor | None = None) -> ObjectResult:
    """Solve once per shape; lowest robust Chamfer among feasible results wins.

    Falls back to the lowest score overall when no shape yields a feasible pose.
    Ties go to the lowest shape index.
    """
    if not bodies:
        raise ValueError("no shape candidates")
    results = []
    for k, body in enumerate(bodies):
        r = solve_object(problem, body, cfg, pool)
        r.shape_index = k
        results.append(r)
    feasible = [r for r in results if r.feasible and np.isfinite(r.score)]
    pick_from = feasible or [r for r in results if np.isfinite(r.score)] or results
    best = min(pick_from, key=lambda r: (r.score if np.isfinite(r.score) else np.inf, r.shape_index))
    return best


def scene_plane(depth: NDArray, masks: NDArray, camera: PinholeCamera,
                plane: Plane | None, seed: int = 0) -> Plane:
    """The given support plane, or a RANSAC fit to the unlabeled pixels."""
    if plane is not None:
        return plane
    bg = backproject(depth, camera, masks, 0)
    return fit_plane_ransac(bg, seed=seed)


def solve_scene(depth: NDArray, masks: NDArray, camera: PinholeCamera, plane: Plane,
                rough_poses: dict[int, Sim3], shapes: dict[int, list[BodyModel]],
                dag: DagOrder, cfg: SamplerConfig) -> SolveResult:
    """Greedy rollout: objects in DAG order, each constrained by its solved parents.

    ``shapes[i]`` holds one body (or several shape candidates) for object ``i``.  A
    failure in one object is recorded as a flag on its result and the rollout
    continues with the rough pose standing in for it.
    """
    pool = ThreadPoolExecutor(cfg.jobs) if cfg.jobs > 1 else None
    solved: dict[int, ParentState] = {}
    out: list[ObjectResult] = []
    try:
        for oid in dag.order:
            if oid == 0:
                continue
            t_start = time.perf_counter()
            parents = dag.parents.get(oid, frozenset())
            problem = ObjectProblem(
                oid, backproject(depth, camera, masks, oid), rough_poses[oid], camera, depth,
                plane, frozenset(parents), {j: solved[j] for j in parents if j in solved})
            bodies = shapes[oid]
            try:
                if len(bodies) == 1:
                    res = solve_object(problem, bodies[0], cfg, pool)
                else:
                    res = solve_with_shape_candidates(problem, bodies, cfg, pool)
            except (ValueError, FloatingPointError) as exc:
                res = ObjectResult(oid, rough_poses[oid], float("nan"), False,
                                   flags=(f"error: {exc}",))
            res.seconds = time.perf_counter() - t_start
            solved[oid] = ParentState(bodies[res.shape_index], res.transform)
            out.append(res)
    finally:
        if pool is not None:
            pool.shutdown()
    return SolveResult(out, tuple(o for o in dag.order if o != 0))
