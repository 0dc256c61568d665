"""The compiled kernels must agree with their numpy twins bit for bit."""

from __future__ import annotations

import numpy as np
import pytest

from physreg import _pykernels as py
from physreg import kernels
from physreg.geometry import build_sdf_grid
from physreg.shapes import box_mesh, cylinder_mesh, icosphere

from .conftest import random_rotation

ck = pytest.importorskip("physreg._ckernels")


def _mesh_arrays(mesh):
    return np.ascontiguousarray(mesh.vertices), np.ascontiguousarray(mesh.faces)


@pytest.fixture(scope="module")
def grid():
    return build_sdf_grid(cylinder_mesh(0.05, 0.12, 24))


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


def test_sdf_query_equal(grid):
    rng = np.random.default_rng(0)
    lo, hi = grid.origin - 0.05, grid.upper + 0.05  # includes clamped exterior queries
    pts = rng.uniform(lo, hi, size=(2000, 3))
    a = ck.sdf_query(grid.values, grid.origin, grid.voxel_size, pts)
    b = py.sdf_query(grid.values, grid.origin, grid.voxel_size, pts)
    np.testing.assert_array_equal(a, b)


def test_mesh_distance_equal():
    v, f = _mesh_arrays(icosphere(0.3, 2))
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, size=(500, 3))
    np.testing.assert_array_equal(ck.mesh_distance(v, f, pts), py.mesh_distance(v, f, pts))


def test_mesh_distance_box_analytic():
    v, f = _mesh_arrays(box_mesh((1.0, 1.0, 1.0)))
    pts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.5, 1.5, 0.0]])
    np.testing.assert_allclose(ck.mesh_distance(v, f, pts), [0.5, 1.5, np.sqrt(2.0)], atol=1e-12)


def test_ray_parity_equal():
    v, f = _mesh_arrays(box_mesh((0.3, 0.2, 0.1)))
    origin = np.array([-0.2, -0.15, -0.1])
    dims = (21, 16, 11)
    for axis in range(3):
        a = ck.ray_parity(v, f, origin, 0.02, dims, axis, 3.7e-6, 1.9e-6)
        b = py.ray_parity(v, f, origin, 0.02, dims, axis, 3.7e-6, 1.9e-6)
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def _topk_case(grid, seed, nr=6, npt=12, nt=300, spread=0.2):
    rng = np.random.default_rng(seed)
    rots = np.stack([random_rotation(rng) for _ in range(nr)])
    pts = rng.normal(scale=0.04, size=(npt, 3))
    base = np.ascontiguousarray(np.einsum("rij,nj->rni", rots, pts))
    offsets = rng.uniform(-spread, spread, size=(nt, 3))
    return base, np.ascontiguousarray(rots), offsets


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("k", [1, 7, 64])
def test_score_topk_equal(grid, seed, k):
    base, srot, off = _topk_case(grid, seed)
    args = (grid.values, grid.origin, grid.voxel_size, base, srot, off, 0.05, k, 3)
    cs, ci = ck.score_topk(*args)
    ps, pi = py.score_topk(*args)
    np.testing.assert_array_equal(ci, pi)
    np.testing.assert_array_equal(cs, ps)


def test_score_topk_far_outside_uses_exact_bound(grid):
    # most candidates start outside the grid box, where the shell bound prunes
    base, srot, off = _topk_case(grid, 10, spread=0.6)
    args = (grid.values, grid.origin, grid.voxel_size, base, srot, off, 0.05, 16, 0)
    cs, ci = ck.score_topk(*args)
    ps, pi = py.score_topk(*args)
    np.testing.assert_array_equal(ci, pi)
    np.testing.assert_array_equal(cs, ps)


def test_score_topk_init_threshold(grid):
    base, srot, off = _topk_case(grid, 4)
    full_s, full_i = py.score_topk(grid.values, grid.origin, grid.voxel_size, base, srot, off,
                                   0.05, 50, 0)
    thr = float(full_s[20])
    cs, ci = ck.score_topk(grid.values, grid.origin, grid.voxel_size, base, srot, off, 0.05, 50,
                           0, thr)
    keep = full_s <= thr
    np.testing.assert_array_equal(ci, full_i[keep])
    np.testing.assert_array_equal(cs, full_s[keep])


def test_score_topk_flat_ids(grid):
    base, srot, off = _topk_case(grid, 2, nr=2, nt=5)
    s, i = ck.score_topk(grid.values, grid.origin, grid.voxel_size, base, srot, off, 0.05, 10, 4)
    assert sorted(i.tolist()) == list(range(4 * 5, 6 * 5))
    assert np.all(np.diff(s) >= 0)


def test_score_topk_rejects_bad_k(grid):
    base, srot, off = _topk_case(grid, 0, nr=1, nt=3)
    for impl in (ck, py):
        with pytest.raises(ValueError):
            impl.score_topk(grid.values, grid.origin, grid.voxel_size, base, srot, off, 0.05, 0, 0)


def test_rasterize_equal():
    rng = np.random.default_rng(5)
    mesh = icosphere(0.1, 2)
    for _ in range(3):
        R = random_rotation(rng)
        vcam = np.ascontiguousarray(mesh.vertices @ R.T + [rng.uniform(-0.05, 0.05), 0.0, 0.6])
        f = np.ascontiguousarray(mesh.faces)
        a = ck.rasterize(vcam, f, 300.0, 300.0, 80.0, 60.0, 160, 120, 1e-6)
        b = py.rasterize(vcam, f, 300.0, 300.0, 80.0, 60.0, 160, 120, 1e-6)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
