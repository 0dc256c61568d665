"""Compare the compiled kernels with their numpy twins.

    python benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python benchmarks/bench_kernels.py --solve    # also one end-to-end object solve per backend

The solve comparison runs each backend in a subprocess because the backend is
chosen at import time (``PHYSREG_PURE_PYTHON=1`` forces numpy).
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from physreg import _pykernels as py
from physreg.geometry import build_sdf_grid
from physreg.shapes import bowl_mesh, icosphere

try:
    from physreg import _ckernels as ck
except ImportError:  # pragma: no cover - extension not built
    ck = None


def _rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


def cases(scale: float):
    """name -> argument tuple, sized by ``scale`` (1.0 is solver-sized)."""
    rng = np.random.default_rng(0)
    mesh = bowl_mesh(0.06, 0.05, 0.008)
    grid = build_sdf_grid(mesh)
    v, f = np.ascontiguousarray(mesh.vertices), np.ascontiguousarray(mesh.faces)
    n = max(int(20000 * scale), 10)
    pts = rng.uniform(grid.origin, grid.upper, size=(n, 3))
    nr, nt = max(int(64 * scale), 2), max(int(1000 * scale), 10)
    rots = np.ascontiguousarray(_rotations(rng, nr))
    sub = rng.normal(scale=0.03, size=(64, 3))
    base = np.ascontiguousarray(np.einsum("rij,nj->rni", rots, sub))
    off = rng.uniform(-0.03, 0.03, size=(nt, 3))
    sphere = icosphere(0.1, 3)
    vcam = np.ascontiguousarray(sphere.vertices + [0.0, 0.0, 0.6])
    dims = tuple(int(d) for d in grid.dims)
    return {
        "sdf_query": (grid.values, grid.origin, grid.voxel_size, pts),
        "mesh_distance": (v, f, pts[: max(n // 10, 10)]),
        "ray_parity": (v, f, grid.origin, grid.voxel_size, dims, 2, 3.7e-6, 1.9e-6),
        "score_topk": (grid.values, grid.origin, grid.voxel_size, base, rots, off, 0.05, 16, 0),
        "rasterize": (vcam, np.ascontiguousarray(sphere.faces), 300.0, 300.0, 160.0, 120.0,
                      320, 240, 1e-6),
    }


def best_time(fn, args, repeat: int) -> float:
    timer = timeit.Timer(lambda: fn(*args))
    return min(timer.repeat(repeat=repeat, number=1))


def solve_seconds(pure: bool) -> float:
    code = (
        "import time\n"
        "from physreg import kernels\n"
        "from physreg.model import BodyModel\n"
        "from physreg.scene_graph import approximate_dag\n"
        "from physreg.scenekit import GenSpec, NoiseSpec, PrimitiveSpec, generate_scene\n"
        "from physreg.solver import SamplerConfig, solve_scene\n"
        "pkg = generate_scene(GenSpec((PrimitiveSpec('box', (0.1, 0.08, 0.06)),), 'stack',\n"
        "                             NoiseSpec(0.002, 0, 15.0, 0.05, 1.2), seed=1))\n"
        "o = pkg.objects[0]\n"
        "body = BodyModel.from_mesh(o.mesh)\n"
        "cfg = SamplerConfig(global_rotations=256, scale_levels=1, scale_samples_per_level=3)\n"
        "t = time.perf_counter()\n"
        "solve_scene(pkg.depth, pkg.masks, pkg.camera, pkg.plane, {1: o.rough_pose}, {1: [body]},\n"
        "            approximate_dag(pkg.contacts), cfg)\n"
        "print(kernels.BACKEND, time.perf_counter() - t)\n"
    )
    env = dict(os.environ)
    env.pop("PHYSREG_PURE_PYTHON", None)
    if pure:
        env["PHYSREG_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return float(out[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0, help="problem size factor")
    ap.add_argument("--solve", action="store_true", help="time a reduced-schedule object solve")
    args = ap.parse_args(argv)
    if ck is None:
        print("compiled extension not built; only the numpy backend is available")
        return 1
    print(f"{'kernel':<14} {'cython s':>10} {'numpy s':>10} {'speedup':>8}")
    for name, a in cases(args.scale).items():
        tc = best_time(getattr(ck, name), a, args.repeat)
        tp = best_time(getattr(py, name), a, args.repeat)
        print(f"{name:<14} {tc:>10.4f} {tp:>10.4f} {tp / tc:>7.1f}x")
    if args.solve:
        tc, tp = solve_seconds(False), solve_seconds(True)
        print(f"{'object solve':<14} {tc:>10.2f} {tp:>10.2f} {tp / tc:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
