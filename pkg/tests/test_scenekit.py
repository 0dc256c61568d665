from __future__ import annotations

import json

import numpy as np
import pytest

from physreg import scenekit as sk
from physreg.geometry import rotation_angle, sim3_inverse
from physreg.model import BodyModel
from physreg.objective import chamfer
from physreg.sensing import backproject
from physreg.solver import ObjectProblem, SamplerConfig, evaluate_candidate

from .conftest import random_sim3


def _spec(prims, **kw):
    return sk.GenSpec([sk.PrimitiveSpec(*p) for p in prims], **kw)


def test_single_box_gt_is_feasible_and_fits():
    pkg = sk.generate_scene(_spec([("box", (0.1, 0.08, 0.06))], seed=2))
    o = pkg.objects[0]
    body = BodyModel.from_mesh(o.mesh)
    pts = backproject(pkg.depth, pkg.camera, pkg.masks, 1)
    prob = ObjectProblem(1, pts, o.rough_pose, pkg.camera, pkg.depth, pkg.plane)
    rep = evaluate_candidate(o.gt_pose, body, prob, SamplerConfig())
    assert rep.feasible
    assert set(rep.checked) == {"inter_object", "environment", "free_space", "contact"}
    # sampled model surface: residual is the squared sample spacing only
    assert chamfer(pts, o.gt_pose, body.index) < 1e-5
    assert o.rough_pose.allclose(o.gt_pose, 1e-12)


def test_stack_contact_graph():
    pkg = sk.generate_scene(_spec([("box", (0.1, 0.1, 0.05)), ("box", (0.08, 0.08, 0.05))],
                                  seed=1))
    assert pkg.contacts.edges == {(0, 1), (1, 2)}


@pytest.mark.parametrize("placement", ["row", "ring", "lean"])
def test_other_placements_are_physical(placement):
    prims = [("box", (0.08, 0.06, 0.14)), ("box", (0.06, 0.05, 0.1)), ("cylinder", (0.03, 0.06))]
    pkg = sk.generate_scene(_spec(prims, placement=placement, seed=4))
    assert len(pkg.objects) == 3
    # every object touches the table or another object
    assert all(any(o.id in e for e in pkg.contacts.edges) for o in pkg.objects)
    assert set(np.unique(pkg.masks)) <= {0, 1, 2, 3}


def test_lean_needs_two_boxes():
    with pytest.raises(ValueError, match="two boxes"):
        sk.generate_scene(_spec([("cylinder", (0.03, 0.1)), ("box", (0.1, 0.1, 0.1))],
                                placement="lean"))


def test_generation_is_bit_identical(tmp_path):
    spec = _spec([("box", (0.1, 0.1, 0.05)), ("cylinder", (0.03, 0.08))],
                 noise=sk.NoiseSpec(0.002, 1, 15.0, 0.05, 1.2), seed=9, distractors=2)
    a = sk.save_scene(sk.generate_scene(spec), tmp_path / "a")
    b = sk.save_scene(sk.generate_scene(spec), tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_perturb_zero_is_identity():
    gt = random_sim3(np.random.default_rng(0))
    assert sk.perturb_pose(gt, 0.0, 0.0, 1.0, seed=1).allclose(gt, 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_perturb_magnitudes_exact(seed):
    gt = random_sim3(np.random.default_rng(seed))
    p = sk.perturb_pose(gt, 15.0, 0.05, 1.2, seed=seed)
    a, b = sim3_inverse(gt), sim3_inverse(p)
    assert np.linalg.norm(b.translation - a.translation) == pytest.approx(0.05, abs=1e-9)
    assert np.degrees(rotation_angle(b.rotation @ a.rotation.T)) == pytest.approx(15.0, abs=1e-9)
    assert b.scale / a.scale in (pytest.approx(1.2), pytest.approx(1 / 1.2))


def test_perturb_rejects_negative():
    with pytest.raises(ValueError):
        sk.perturb_pose(random_sim3(np.random.default_rng(0)), -1.0, 0.0, 1.0, 0)


def test_save_load_round_trip(tmp_path):
    pkg = sk.generate_scene(_spec([("box", (0.1, 0.1, 0.05)), ("bowl", (0.06, 0.05))],
                                  noise=sk.NoiseSpec(0.002, 0, 5.0, 0.01, 1.1), seed=5,
                                  distractors=1))
    back = sk.load_scene(sk.save_scene(pkg, tmp_path / "s"))
    np.testing.assert_array_equal(back.depth, pkg.depth)
    np.testing.assert_array_equal(back.masks, pkg.masks)
    assert back.camera == pkg.camera and back.contacts == pkg.contacts
    for x, y in zip(back.objects, pkg.objects):
        assert x.rough_pose.allclose(y.rough_pose, 1e-12) and x.gt_pose.allclose(y.gt_pose, 1e-12)
        assert x.true_candidate == y.true_candidate and len(x.candidates) == 2
        np.testing.assert_allclose(x.mesh.vertices, y.mesh.vertices, atol=1e-12)


def test_missing_mesh_named(tmp_path):
    root = sk.save_scene(sk.generate_scene(_spec([("box", (0.1, 0.1, 0.1))])), tmp_path / "s")
    (root / "meshes" / "obj_1.obj").unlink()
    with pytest.raises(sk.SceneFormatError, match="obj_1.obj"):
        sk.load_scene(root)


def test_mask_size_mismatch(tmp_path):
    from physreg.sensing import write_pgm16

    root = sk.save_scene(sk.generate_scene(_spec([("box", (0.1, 0.1, 0.1))])), tmp_path / "s")
    write_pgm16(root / "masks.pgm", np.zeros((10, 10), dtype=np.int64))
    with pytest.raises(sk.SceneFormatError, match="mask size"):
        sk.load_scene(root)


def test_bad_manifest(tmp_path):
    root = sk.save_scene(sk.generate_scene(_spec([("box", (0.1, 0.1, 0.1))])), tmp_path / "s")
    man = json.loads((root / "scene.json").read_text())
    man["objects"][0]["id"] = 5
    (root / "scene.json").write_text(json.dumps(man))
    with pytest.raises(sk.SceneFormatError, match="ids must be"):
        sk.load_scene(root)
    (root / "scene.json").write_text("{not json")
    with pytest.raises(sk.SceneFormatError, match="malformed"):
        sk.load_scene(root)


def test_spec_validation():
    with pytest.raises(ValueError):
        sk.PrimitiveSpec("teapot", (1.0,))
    with pytest.raises(ValueError):
        sk.PrimitiveSpec("box", (0.1, -1.0, 0.1))
    with pytest.raises(ValueError):
        _spec([("box", (0.1, 0.1, 0.1))], placement="pile")
    with pytest.raises(ValueError):
        sk.NoiseSpec(scale_factor=0.8)
    with pytest.raises(ValueError):
        _spec([("box", (0.1, 0.1, 0.1))], placement="manual")


def test_distractor_candidates_include_truth():
    pkg = sk.generate_scene(_spec([("cylinder", (0.04, 0.1))], seed=3, distractors=2))
    o = pkg.objects[0]
    assert len(o.candidates) == 3
    np.testing.assert_array_equal(o.candidates[o.true_candidate].vertices, o.mesh.vertices)
