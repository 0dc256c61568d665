"""Command-line front end: ``physreg gen | solve | eval``.

Exit codes: 0 success, 2 usage or input error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .baseline_gd import GdScene, gd_refine
from .config import CONFIG_ENV, ConfigError, RunConfig, load_gen_spec, load_run_config
from .constraints import ENV, FREE, SceneState, penetration_depth
from .geometry import Sim3, TriangleMesh, merge_meshes, save_obj, sim3_apply, sim3_inverse
from .metrics import MetricsReport, evaluate_scene
from .model import BodyModel
from .scene_graph import SceneGraph, approximate_dag, infer_contacts_geometric
from .scenekit import SceneFormatError, ScenePackage, generate_scene, load_scene, save_scene
from .solver import ObjectResult, SolveResult, scene_plane, solve_scene

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3
POSES_FORMAT = "physreg-poses/1"


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


# ---------------------------------------------------------------- poses I/O

def write_poses(path: Path, result: SolveResult) -> None:
    """Object-to-camera 4x4 poses, row-major, in the manifest convention."""
    objs = [{"id": r.object_id, "pose": sim3_inverse(r.transform).matrix().tolist(),
             "shape_index": r.shape_index, "feasible": bool(r.feasible)}
            for r in sorted(result.objects, key=lambda r: r.object_id)]
    text = json.dumps({"format": POSES_FORMAT, "convention": "object_to_camera",
                       "objects": objs}, indent=1, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")


def read_poses(path: Path) -> tuple[dict[int, Sim3], dict[int, bool]]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"{path}: cannot read poses ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed poses file ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(data, dict) or not isinstance(data.get("objects"), list):
        raise InputError(f"{path}: expected an object with an 'objects' list")
    poses, feasible = {}, {}
    for k, item in enumerate(data["objects"]):
        where = f"{path}: objects[{k}]"
        try:
            oid = int(item["id"])
            m = np.asarray(item["pose"], dtype=np.float64)
            if m.shape != (4, 4) or not np.all(np.isfinite(m)):
                raise ValueError("pose must be a finite 4x4 matrix")
            poses[oid] = sim3_inverse(Sim3.from_matrix(m))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{where}: {exc}") from None
        feasible[oid] = bool(item.get("feasible", True))
    return poses, feasible


def export_reconstruction(path: Path, pkg: ScenePackage, poses: dict[int, Sim3],
                          shape_index: dict[int, int]) -> None:
    """All posed shapes merged into one camera-frame OBJ."""
    meshes = []
    for o in pkg.objects:
        k = shape_index.get(o.id, 0)
        mesh = o.candidates[k] if o.candidates and k < len(o.candidates) else o.mesh
        T = sim3_inverse(poses[o.id])
        meshes.append(TriangleMesh(sim3_apply(T, mesh.vertices), mesh.faces))
    save_obj(merge_meshes(meshes), path)


# ----------------------------------------------------------------- records

@dataclass
class RunRecord:
    scene: str
    config: RunConfig
    result: SolveResult
    metrics: MetricsReport | None
    method: str

    def to_json(self) -> str:
        objs = []
        for r in sorted(self.result.objects, key=lambda r: r.object_id):
            rep = r.report
            objs.append({
                "id": r.object_id, "score": _num(r.score), "feasible": bool(r.feasible),
                "shape_index": r.shape_index, "rejected": r.rejected, "flags": list(r.flags),
                "evaluated": dict(sorted(r.evaluated.items())), "seconds": r.seconds,
                "constraints": None if rep is None else {
                    "min_inter_object": {str(k): _num(v) for k, v in sorted(rep.min_inter_object.items())},
                    "min_environment": _num(rep.min_environment),
                    "max_free_space_violation": _num(rep.max_free_space_violation),
                    "min_contact_abs": _num(rep.min_contact_abs),
                    "checked": list(rep.checked)},
            })
        m = self.metrics
        data = {
            "scene": self.scene, "method": self.method, "version": __version__,
            "config": self.config.to_text(), "order": list(self.result.order), "objects": objs,
            "seconds_per_object": {str(r.object_id): r.seconds for r in self.result.objects},
            "metrics": None if m is None else {
                "adds": {str(k): v for k, v in m.adds.items()},
                "adds_auc": {f"{round(k * 100)}cm": v for k, v in m.auc.items()},
                "nps": {str(k): v for k, v in m.nps.items()}, "nps_scene": m.scene_nps,
                "sps": {str(k): v for k, v in m.sps.items()}, "sps_scene": m.scene_sps},
        }
        return json.dumps(data, indent=1, sort_keys=True) + "\n"


def _num(x: float):
    x = float(x)
    return x if np.isfinite(x) else str(x)


# ----------------------------------------------------------------- solving

def _contacts(pkg: ScenePackage, mode: str, bodies: dict[int, BodyModel], plane) -> SceneGraph:
    if mode == "file":
        if pkg.contacts is None:
            raise InputError("package has no contacts file; use --contacts oracle")
        return pkg.contacts
    if not pkg.has_gt:
        raise InputError("--contacts oracle needs ground-truth poses in the package")
    return infer_contacts_geometric(bodies, {o.id: o.gt_pose for o in pkg.objects}, plane)


def _gd_result(pkg: ScenePackage, bodies: dict[int, BodyModel], plane, cfg: RunConfig,
               dag) -> SolveResult:
    scene = GdScene.from_observation(bodies, pkg.depth, pkg.masks, pkg.camera, plane, cfg.gd)
    t0 = time.perf_counter()
    res = gd_refine({o.id: o.rough_pose for o in pkg.objects}, scene, cfg.gd)
    per = (time.perf_counter() - t0) / max(1, len(pkg.objects))
    state = SceneState(bodies, res.poses, plane, pkg.camera, pkg.depth)
    tol = cfg.sampler
    out = []
    for o in pkg.objects:
        ok = penetration_depth(o.id, ENV, state) <= tol.environment_tol
        ok &= penetration_depth(o.id, FREE, state) <= tol.free_space_tol
        ok &= all(penetration_depth(o.id, j.id, state) <= tol.inter_object_tol
                  for j in pkg.objects if j.id != o.id)
        out.append(ObjectResult(o.id, res.poses[o.id], float(res.trace[-1]), bool(ok),
                                flags=(f"gd:{res.stop_reason}", "posthoc_feasibility"),
                                seconds=per))
    return SolveResult(out, tuple(i for i in dag.order if i != 0))


def run_solve(scene_dir: Path, cfg: RunConfig, contacts: str = "file", baseline: str | None = None,
              shape_candidates: bool = False) -> tuple[ScenePackage, RunRecord]:
    pkg = load_scene(scene_dir)
    bodies = {o.id: BodyModel.from_mesh(o.mesh) for o in pkg.objects}
    plane = scene_plane(pkg.depth, pkg.masks, pkg.camera, pkg.plane, cfg.seed)
    dag = approximate_dag(_contacts(pkg, contacts, bodies, plane))
    if baseline == "gd":
        result = _gd_result(pkg, bodies, plane, cfg, dag)
        method = "gd"
    else:
        shapes = {}
        for o in pkg.objects:
            if shape_candidates and o.candidates:
                shapes[o.id] = [BodyModel.from_mesh(m) for m in o.candidates]
            else:
                shapes[o.id] = [bodies[o.id]]
        result = solve_scene(pkg.depth, pkg.masks, pkg.camera, plane,
                             {o.id: o.rough_pose for o in pkg.objects}, shapes, dag, cfg.sampler)
        method = "sampler" if cfg.sampler.use_physics else "sampler-no-physics"
    metrics = None
    if pkg.has_gt:
        metrics = evaluate_scene(scene_dir.name, result.poses(),
                                 {o.id: o.gt_pose for o in pkg.objects}, bodies, plane,
                                 pkg.camera, pkg.depth,
                                 {r.object_id: r.feasible for r in result.objects}, cfg.rollout)
    return pkg, RunRecord(str(scene_dir), cfg, result, metrics, method)


def _solve_one(args: tuple) -> tuple[str, int, str]:
    """Worker for one scene directory; returns (scene, exit code, message)."""
    scene, out, cfg, contacts, baseline, shape_candidates = args
    try:
        pkg, record = run_solve(Path(scene), cfg, contacts, baseline, shape_candidates)
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_poses(out / "poses.json", record.result)
        (out / "run.json").write_text(record.to_json(), encoding="utf-8")
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        export_reconstruction(out / "reconstruction.obj", pkg, record.result.poses(),
                              {r.object_id: r.shape_index for r in record.result.objects})
        if record.metrics is not None:
            (out / "metrics.csv").write_text(record.metrics.to_csv(), encoding="utf-8")
            (out / "metrics.txt").write_text(record.metrics.to_text(), encoding="utf-8")
        return scene, EXIT_OK, f"{scene}: wrote {out}"
    except (InputError, SceneFormatError, ConfigError) as exc:
        return scene, EXIT_INPUT, f"{scene}: {exc}"
    except Exception:  # noqa: BLE001 - reported as an internal error
        return scene, EXIT_INTERNAL, f"{scene}: internal error\n{traceback.format_exc()}"


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    spec = load_gen_spec(args.spec, args.seed)
    try:
        pkg = generate_scene(spec)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    save_scene(pkg, args.out)
    print(f"wrote {args.out} ({len(pkg.objects)} objects)")
    return EXIT_OK


def cmd_solve(args) -> int:
    overrides = {}
    if args.no_physics:
        overrides["use_physics"] = False
    scenes = [Path(s) for s in args.scenes]
    multi = len(scenes) > 1
    if args.out is not None and multi:
        raise InputError("--out needs a single scene directory")
    if not multi:
        overrides["jobs"] = args.jobs
    cfg = load_run_config(args.config, args.seed, overrides)
    for s in scenes:
        if not (s / "scene.json").is_file():
            raise InputError(f"{s}: not a scene package (scene.json missing)")
    tasks = [(str(s), str(Path(args.out) if args.out else s / "results"), cfg, args.contacts,
              args.baseline, args.shape_candidates) for s in scenes]
    if multi and args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            outcomes = list(ex.map(_solve_one, tasks))
    else:
        outcomes = [_solve_one(t) for t in tasks]
    code = EXIT_OK
    for _, c, msg in outcomes:
        print(msg, file=sys.stderr if c else sys.stdout)
        code = max(code, c)
    return code


def cmd_eval(args) -> int:
    scene = Path(args.scene)
    pkg = load_scene(scene)
    if not pkg.has_gt:
        raise InputError(f"{scene}: package has no ground-truth poses")
    poses, feasible = read_poses(Path(args.poses))
    missing = sorted({o.id for o in pkg.objects} - set(poses))
    if missing:
        raise InputError(f"{args.poses}: no pose for objects {missing}")
    cfg = load_run_config(args.config, args.seed if args.seed is not None else 0)
    bodies = {o.id: BodyModel.from_mesh(o.mesh) for o in pkg.objects}
    plane = scene_plane(pkg.depth, pkg.masks, pkg.camera, pkg.plane, cfg.seed)
    report = evaluate_scene(scene.name, poses, {o.id: o.gt_pose for o in pkg.objects}, bodies,
                            plane, pkg.camera, pkg.depth, feasible, cfg.rollout)
    out = Path(args.out) if args.out else scene / "results"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="physreg", description="Physics-constrained multi-object registration.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic scene package")
    g.add_argument("spec", help="generation spec (key = value text)")
    g.add_argument("out", help="output package directory")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="correct the rough poses of one or more packages")
    s.add_argument("scenes", nargs="+", help="scene package directories")
    s.add_argument("--config", help=f"run config (default: ${CONFIG_ENV})")
    s.add_argument("--seed", type=int, help="RNG seed (required unless set in the config)")
    s.add_argument("--jobs", type=int, default=1,
                   help="worker count: threads for one scene, processes across scenes")
    s.add_argument("--no-physics", action="store_true", help="skip constraint rejection")
    s.add_argument("--baseline", choices=["gd"], help="run the gradient-descent baseline")
    s.add_argument("--contacts", choices=["file", "oracle"], default="file",
                   help="contact graph source: package file or ground-truth geometry")
    s.add_argument("--shape-candidates", action="store_true",
                   help="pick each object's shape among its candidate meshes")
    s.add_argument("--out", help="output directory (default: <scene>/results)")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="score poses against the package ground truth")
    e.add_argument("scene", help="scene package directory")
    e.add_argument("poses", help="poses.json written by solve")
    e.add_argument("--config", help=f"run config for rollout settings (default: ${CONFIG_ENV})")
    e.add_argument("--seed", type=int, help="seed for the plane fit when none is stored")
    e.add_argument("--out", help="output directory (default: <scene>/results)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise InputError("--jobs must be at least 1")
        return args.func(args)
    except (InputError, ConfigError, SceneFormatError) as exc:
        print(f"physreg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception:  # noqa: BLE001
        print("physreg: internal error", file=sys.stderr)
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
