"""Synthetic desk scenes and the on-disk scene package.

World frame: the support plane is ``z = 0`` with ``+z`` up.  Meshes are centered on
their bounding box, so an upright primitive rests at height ``h / 2``.  Files store
object-to-camera poses as 4x4 ``[sR | t]``; in memory poses use the camera-to-object
convention of the rest of the package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .constraints import check_inter_object
from .geometry import Sim3, TriangleMesh, load_obj, save_obj, so3_exp
from .model import BodyModel
from .scene_graph import SceneGraph, infer_contacts_geometric, load_contacts, save_contacts
from .sensing import (
    PinholeCamera,
    Plane,
    read_pfm,
    read_pgm16,
    render_plane,
    render_scene,
    write_pfm,
    write_pgm16,
)
from .shapes import make_primitive

FORMAT = "physreg-scene/1"
PLACEMENTS = ("stack", "row", "ring", "lean", "manual")
OVERLAP_TOL = 0.001


class SceneFormatError(ValueError):
    """Malformed or inconsistent scene package."""


@dataclass(frozen=True)
class PrimitiveSpec:
    kind: str
    dims: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if self.kind not in ("box", "cylinder", "bowl", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not self.dims or any(not d > 0 for d in self.dims):
            raise ValueError(f"{self.kind} dimensions must be positive, got {self.dims}")

    def mesh(self) -> TriangleMesh:
        return make_primitive(self.kind, self.dims)


@dataclass(frozen=True)
class NoiseSpec:
    depth_sigma: float = 0.0
    mask_erosion: int = 0
    rot_deg: float = 0.0
    trans: float = 0.0
    scale_factor: float = 1.0

    def __post_init__(self):
        if self.depth_sigma < 0 or self.mask_erosion < 0 or self.rot_deg < 0 or self.trans < 0:
            raise ValueError("noise magnitudes must be non-negative")
        if not self.scale_factor >= 1.0:
            raise ValueError("scale factor must be >= 1 (applied as f or 1/f)")


def default_camera() -> PinholeCamera:
    return PinholeCamera(300.0, 300.0, 160.0, 120.0, 320, 240)


@dataclass(frozen=True)
class GenSpec:
    """What to build: primitives, how to place them, how to corrupt the observation."""

    primitives: tuple[PrimitiveSpec, ...]
    placement: str = "stack"
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0
    camera: PinholeCamera = field(default_factory=default_camera)
    camera_distance: float = 0.8
    camera_elevation_deg: float = 40.0
    distractors: int = 0
    poses: tuple | None = None  # object-to-world 4x4 for placement "manual"

    def __post_init__(self):
        prims = tuple(p if isinstance(p, PrimitiveSpec) else PrimitiveSpec(*p) for p in self.primitives)
        object.__setattr__(self, "primitives", prims)
        if not prims:
            raise ValueError("scene needs at least one primitive")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        if self.placement == "manual" and (self.poses is None or len(self.poses) != len(prims)):
            raise ValueError("manual placement needs one pose per primitive")
        if not self.camera_distance > 0:
            raise ValueError("camera distance must be positive")
        if self.distractors < 0:
            raise ValueError("distractor count must be non-negative")


@dataclass
class SceneObject:
    id: int
    mesh: TriangleMesh
    rough_pose: Sim3
    gt_pose: Sim3 | None = None
    candidates: list[TriangleMesh] = field(default_factory=list)
    true_candidate: int | None = None
    kind: str = ""


@dataclass
class ScenePackage:
    camera: PinholeCamera
    depth: NDArray
    masks: NDArray
    objects: list[SceneObject]
    plane: Plane | None = None
    contacts: SceneGraph | None = None
    meta: dict = field(default_factory=dict)

    def object(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    @property
    def has_gt(self) -> bool:
        return all(o.gt_pose is not None for o in self.objects)


# ----------------------------------------------------------- perturbations

def _random_unit(rng: np.random.Generator) -> NDArray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_pose(gt: Sim3, rot_deg: float, trans: float, scale_factor: float,
                 seed) -> Sim3:
    """Corrupt a camera-to-object pose in its object-to-camera form.

    The rotation is left-multiplied by an axis-angle of exactly ``rot_deg``, the
    camera-frame translation moves by exactly ``trans`` and the size is multiplied
    by ``scale_factor`` or its inverse with equal probability.
    """
    if rot_deg < 0 or trans < 0 or not scale_factor > 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    axis, direction = _random_unit(rng), _random_unit(rng)
    flip = rng.random() < 0.5
    o2c = gt.inverse()
    rot = so3_exp(math.radians(rot_deg) * axis) @ o2c.rotation
    size = o2c.scale * (scale_factor if flip else 1.0 / scale_factor)
    return Sim3(size, rot, o2c.translation + trans * direction).inverse()


# ------------------------------------------------------------- placement

def _rot_z(yaw: float) -> NDArray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a: float) -> NDArray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _half_height(mesh: TriangleMesh) -> float:
    lo, hi = mesh.bounds()
    return 0.5 * float(hi[2] - lo[2])


def _footprint_radius(mesh: TriangleMesh) -> float:
    return float(np.max(np.linalg.norm(mesh.vertices[:, :2], axis=1)))


def _top_half_extent(mesh: TriangleMesh) -> float:
    lo, hi = mesh.bounds()
    return 0.5 * float(min(hi[0] - lo[0], hi[1] - lo[1]))


def _place_stack(prims, meshes, rng, base_xy=(0.0, 0.0), z0=0.0, start_yaw=None):
    poses = []
    z = z0
    x, y = base_xy
    for k, (p, m) in enumerate(zip(prims, meshes)):
        if k > 0:
            below = prims[k - 1]
            if below.kind in ("bowl", "sphere"):
                raise ValueError(f"cannot stack object {k + 1} on a {below.kind}")
            room = 0.3 * min(_top_half_extent(meshes[k - 1]), _top_half_extent(m))
            x, y = poses[-1][:2, 3] + rng.uniform(-room, room, size=2)
        yaw = rng.uniform(-math.pi, math.pi) if (k > 0 or start_yaw is None) else start_yaw
        hh = _half_height(m)
        T = np.eye(4)
        T[:3, :3] = _rot_z(yaw)
        T[:3, 3] = (x, y, z + hh)
        poses.append(T)
        z += 2 * hh
    return poses


def _place_row(meshes, rng, gap=0.02):
    radii = [_footprint_radius(m) for m in meshes]
    xs, x = [], 0.0
    for k, r in enumerate(radii):
        if k > 0:
            x += radii[k - 1] + gap + r
        xs.append(x)
    shift = 0.5 * (xs[0] + xs[-1])
    poses = []
    for m, x in zip(meshes, xs):
        T = np.eye(4)
        T[:3, :3] = _rot_z(rng.uniform(-math.pi, math.pi))
        T[:3, 3] = (x - shift, 0.0, _half_height(m))
        poses.append(T)
    return poses


def _place_ring(meshes, rng, gap=0.02):
    n = len(meshes)
    radii = [_footprint_radius(m) for m in meshes]
    if n == 1:
        R = 0.0
    else:
        need = max(radii[k] + radii[(k + 1) % n] + gap for k in range(n))
        R = need / (2 * math.sin(math.pi / n))
    poses = []
    for k, m in enumerate(meshes):
        a = 2 * math.pi * k / n
        T = np.eye(4)
        T[:3, :3] = _rot_z(rng.uniform(-math.pi, math.pi))
        T[:3, 3] = (R * math.cos(a), R * math.sin(a), _half_height(m))
        poses.append(T)
    return poses


def _place_lean(prims, meshes, rng):
    """Object 1 stands upright; box 2 leans on its -x face; the rest stack on object 1."""
    if len(prims) < 2 or prims[0].kind != "box" or prims[1].kind != "box":
        raise ValueError("lean placement needs two boxes first (support, leaner)")
    support = np.eye(4)
    support[:3, 3] = (0.0, 0.0, _half_height(meshes[0]))
    s_lo, s_hi = meshes[0].bounds()
    v = meshes[1].vertices
    tilt = rng.uniform(math.radians(12), math.radians(25))
    rv = v @ _rot_y(tilt).T
    touch = int(np.argmax(rv[:, 0]))
    shift = np.array([s_lo[0] - rv[touch, 0], 0.0, -rv[:, 2].min()])
    if rv[touch, 2] + shift[2] > 2 * _half_height(meshes[0]) - 0.002:
        raise ValueError("leaning box is taller than its support")
    lean = np.eye(4)
    lean[:3, :3] = _rot_y(tilt)
    lean[:3, 3] = shift
    poses = [support, lean]
    if len(prims) > 2:
        top = _place_stack(prims[:1] + prims[2:], meshes[:1] + meshes[2:], rng, start_yaw=0.0)
        poses += top[1:]
    return poses


def _look_at(distance: float, elevation_deg: float, azimuth: float, target: NDArray) -> Sim3:
    """World-to-camera transform (camera x right, y down, z forward)."""
    e = math.radians(elevation_deg)
    eye = target + distance * np.array([math.cos(e) * math.cos(azimuth),
                                        math.cos(e) * math.sin(azimuth), math.sin(e)])
    fwd = (target - eye) / np.linalg.norm(target - eye)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Sim3(1.0, R, -R @ eye)


def _distractors(p: PrimitiveSpec, count: int) -> list[TriangleMesh]:
    """Same-footprint shapes of a different kind or aspect."""
    d = p.dims
    if p.kind == "box":
        pool = [PrimitiveSpec("cylinder", (0.5 * min(d[0], d[1]), d[2])),
                PrimitiveSpec("box", (d[0] * 0.5, d[1] * 1.6, d[2] * 1.4)),
                PrimitiveSpec("sphere", (0.5 * max(d),))]
    elif p.kind == "cylinder":
        pool = [PrimitiveSpec("box", (2 * d[0], 2 * d[0], d[1])),
                PrimitiveSpec("cylinder", (d[0] * 0.6, d[1] * 1.6)),
                PrimitiveSpec("sphere", (max(d[0], 0.5 * d[1]),))]
    elif p.kind == "bowl":
        pool = [PrimitiveSpec("cylinder", (d[0], d[1])),
                PrimitiveSpec("box", (2 * d[0], 2 * d[0], d[1])),
                PrimitiveSpec("sphere", (d[0],))]
    else:
        pool = [PrimitiveSpec("box", (2 * d[0],) * 3),
                PrimitiveSpec("cylinder", (d[0], 2 * d[0])),
                PrimitiveSpec("box", (2 * d[0], d[0], d[0]))]
    return [q.mesh() for q in pool[:count]]


def _check_overlaps(bodies: dict[int, BodyModel], poses: dict[int, Sim3]) -> None:
    ids = sorted(bodies)
    for a, i in enumerate(ids):
        for j in ids[a + 1:]:
            m1, _ = check_inter_object(bodies[i].sdf, poses[i], poses[j], bodies[j].check_points)
            m2, _ = check_inter_object(bodies[j].sdf, poses[j], poses[i], bodies[i].check_points)
            if min(m1, m2) < -OVERLAP_TOL:
                raise ValueError(f"objects {i} and {j} overlap by {-min(m1, m2):.4f} m")


def generate_scene(spec: GenSpec) -> ScenePackage:
    rng = np.random.default_rng(spec.seed)
    prims = list(spec.primitives)
    meshes = [p.mesh() for p in prims]
    if spec.placement == "stack":
        world = _place_stack(prims, meshes, rng)
    elif spec.placement == "row":
        world = _place_row(meshes, rng)
    elif spec.placement == "ring":
        world = _place_ring(meshes, rng)
    elif spec.placement == "lean":
        world = _place_lean(prims, meshes, rng)
    else:
        world = [np.asarray(T, dtype=np.float64).reshape(4, 4) for T in spec.poses]

    centers = np.array([T[:3, 3] for T in world])
    target = np.array([centers[:, 0].mean(), centers[:, 1].mean(), 0.5 * centers[:, 2].max()])
    w2c = _look_at(spec.camera_distance, spec.camera_elevation_deg,
                   rng.uniform(-math.pi, math.pi), target)
    o2c = [w2c.compose(Sim3.from_matrix(T)) for T in world]
    gt = {k + 1: T.inverse() for k, T in enumerate(o2c)}

    bodies = {k + 1: BodyModel.from_mesh(m) for k, m in enumerate(meshes)}
    _check_overlaps(bodies, gt)

    n_c = w2c.rotation @ np.array([0.0, 0.0, 1.0])
    plane = Plane(n_c, float(n_c @ w2c.translation))
    cam = spec.camera
    depth, labels = render_scene(meshes, o2c, cam)
    plane_depth = render_plane(plane, cam)
    labels = np.where(depth <= plane_depth, labels, 0)
    depth = np.minimum(depth, plane_depth)
    noise = spec.noise
    if noise.depth_sigma > 0:
        ok = np.isfinite(depth)
        depth = depth + np.where(ok, rng.normal(0.0, noise.depth_sigma, depth.shape), 0.0)
    if noise.mask_erosion > 0:
        eroded = np.zeros_like(labels)
        for k in range(1, len(meshes) + 1):
            keep = ndimage.binary_erosion(labels == k, iterations=noise.mask_erosion)
            eroded[keep] = k
        labels = eroded
    # float32 so the package round-trips losslessly through PFM
    depth = np.where(np.isfinite(depth) & (depth > 0), depth, np.inf).astype(np.float32).astype(np.float64)

    graph = infer_contacts_geometric(bodies, gt, plane)
    graph = SceneGraph(len(meshes) + 1, graph.edges)
    objects = []
    for k, (p, m) in enumerate(zip(prims, meshes)):
        oid = k + 1
        rough = perturb_pose(gt[oid], noise.rot_deg, noise.trans, noise.scale_factor,
                             [spec.seed, oid])
        cands: list[TriangleMesh] = []
        true_idx = None
        if spec.distractors:
            cands = [m] + _distractors(p, spec.distractors)
            perm = rng.permutation(len(cands))
            cands = [cands[i] for i in perm]
            true_idx = int(np.nonzero(perm == 0)[0][0])
        objects.append(SceneObject(oid, m, rough, gt[oid], cands, true_idx, p.kind))
    meta = {"seed": spec.seed, "placement": spec.placement,
            "primitives": [[p.kind, list(p.dims)] for p in prims]}
    return ScenePackage(cam, depth, labels.astype(np.int64), objects, plane, graph, meta)


# ------------------------------------------------------------------- files

def _pose_out(T: Sim3) -> list[list[float]]:
    return T.inverse().matrix().tolist()


def _pose_in(value, where: str) -> Sim3:
    try:
        m = np.asarray(value, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        return Sim3.from_matrix(m).inverse()
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{where}: {exc}") from None


def save_scene(pkg: ScenePackage, path: str | Path) -> Path:
    """Write ``scene.json`` plus depth, masks, meshes and contacts under ``path``."""
    root = Path(path)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    write_pfm(root / "depth.pfm", pkg.depth)
    write_pgm16(root / "masks.pgm", pkg.masks)
    objs = []
    for o in pkg.objects:
        mesh_rel = f"meshes/obj_{o.id}.obj"
        save_obj(o.mesh, root / mesh_rel)
        cand_rel = []
        for c, cm in enumerate(o.candidates):
            rel = f"meshes/obj_{o.id}_cand_{c}.obj"
            save_obj(cm, root / rel)
            cand_rel.append(rel)
        entry = {"id": o.id, "kind": o.kind, "mesh": mesh_rel, "rough_pose": _pose_out(o.rough_pose),
                 "gt_pose": _pose_out(o.gt_pose) if o.gt_pose is not None else None,
                 "candidates": cand_rel}
        if o.true_candidate is not None:
            entry["true_candidate"] = o.true_candidate
        objs.append(entry)
    contacts = None
    if pkg.contacts is not None:
        contacts = "contacts.txt"
        save_contacts(pkg.contacts, root / contacts)
    plane = None
    if pkg.plane is not None:
        plane = {"normal": pkg.plane.normal.tolist(), "offset": pkg.plane.offset}
    manifest = {"format": FORMAT, "camera": pkg.camera.to_dict(), "plane": plane,
                "depth": "depth.pfm", "masks": "masks.pgm", "contacts": contacts,
                "objects": objs, "meta": pkg.meta}
    (root / "scene.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                     encoding="ascii")
    return root


def _field(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SceneFormatError(f"{where}: missing field {key!r}")
    return d[key]


def _existing(root: Path, rel, where: str) -> Path:
    if not isinstance(rel, str):
        raise SceneFormatError(f"{where}: expected a relative path string")
    p = root / rel
    if not p.is_file():
        raise SceneFormatError(f"{where}: missing file {p}")
    return p


def load_scene(path: str | Path) -> ScenePackage:
    root = Path(path)
    mpath = root / "scene.json" if root.is_dir() else root
    root = mpath.parent
    if not mpath.is_file():
        raise SceneFormatError(f"missing manifest {mpath}")
    try:
        man = json.loads(mpath.read_text(encoding="ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"{mpath}: malformed manifest: {exc}") from None
    if not isinstance(man, dict):
        raise SceneFormatError(f"{mpath}: manifest must be an object")
    if man.get("format", FORMAT) != FORMAT:
        raise SceneFormatError(f"{mpath}: unsupported format {man.get('format')!r}")
    camd = _field(man, "camera", str(mpath))
    try:
        cam = PinholeCamera(*(_field(camd, k, f"{mpath}: camera")
                              for k in ("fx", "fy", "cx", "cy", "width", "height")))
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{mpath}: camera: {exc}") from None
    try:
        depth = read_pfm(_existing(root, _field(man, "depth", str(mpath)), f"{mpath}: depth"))
        masks = read_pgm16(_existing(root, _field(man, "masks", str(mpath)), f"{mpath}: masks"))
    except SceneFormatError:
        raise
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from None
    if depth.shape != cam.shape:
        raise SceneFormatError(f"{mpath}: depth is {depth.shape[1]}x{depth.shape[0]}, "
                               f"camera is {cam.width}x{cam.height}")
    if masks.shape != depth.shape:
        raise SceneFormatError(f"{mpath}: mask size {masks.shape} differs from depth {depth.shape}")
    plane = None
    if man.get("plane") is not None:
        pd = man["plane"]
        try:
            plane = Plane(_field(pd, "normal", f"{mpath}: plane"), _field(pd, "offset", f"{mpath}: plane"))
        except (TypeError, ValueError) as exc:
            raise SceneFormatError(f"{mpath}: plane: {exc}") from None
    raw = _field(man, "objects", str(mpath))
    if not isinstance(raw, list) or not raw:
        raise SceneFormatError(f"{mpath}: objects must be a non-empty list")
    objects = []
    for k, od in enumerate(raw):
        where = f"{mpath}: objects[{k}]"
        oid = _field(od, "id", where)
        if oid != k + 1:
            raise SceneFormatError(f"{where}: ids must be 1..N in order, got {oid!r}")
        try:
            mesh = load_obj(_existing(root, _field(od, "mesh", where), f"{where}.mesh"))
            cands = [load_obj(_existing(root, c, f"{where}.candidates[{j}]"))
                     for j, c in enumerate(od.get("candidates") or [])]
        except SceneFormatError:
            raise
        except ValueError as exc:
            raise SceneFormatError(f"{where}: {exc}") from None
        rough = _pose_in(_field(od, "rough_pose", where), f"{where}.rough_pose")
        gt = od.get("gt_pose")
        gt = _pose_in(gt, f"{where}.gt_pose") if gt is not None else None
        objects.append(SceneObject(oid, mesh, rough, gt, cands, od.get("true_candidate"),
                                   od.get("kind", "")))
    contacts = None
    if man.get("contacts"):
        p = _existing(root, man["contacts"], f"{mpath}: contacts")
        try:
            contacts = load_contacts(p, len(objects) + 1)
        except ValueError as exc:
            raise SceneFormatError(str(exc)) from None
    return ScenePackage(cam, depth, masks, objects, plane, contacts, man.get("meta", {}))
