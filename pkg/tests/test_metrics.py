import numpy as np
import pytest

from mppose import so3
from mppose.mesh import make_plain_cube, make_l_block
from mppose.metrics import (
    PoseTrial,
    add_error,
    proj2d_error,
    recall,
    rotation_error,
    vsd_error,
)
from mppose.render import Camera, render


def rand_pose(rng, tz=700.0):
    return (so3.sample_uniform_rotation(rng), np.array([0.0, 0.0, tz]) + rng.normal(0, 20, 3))


class TestRotationError:
    def test_zero_at_identity(self):
        q = so3.sample_uniform_rotation(np.random.default_rng(0))
        assert rotation_error(q, q) == pytest.approx(0.0, abs=1e-7)

    def test_known_angle(self):
        q = so3.quat_identity()
        r = so3.axis_angle_quat(np.array([0, 1.0, 0]), 0.4)
        assert rotation_error(q, r) == pytest.approx(0.4, abs=1e-12)

    def test_accepts_matrices(self):
        rng = np.random.default_rng(1)
        a, b = so3.sample_uniform_rotation(rng), so3.sample_uniform_rotation(rng)
        via_q = rotation_error(a, b)
        via_m = rotation_error(so3.quat_to_matrix(a), so3.quat_to_matrix(b))
        assert via_q == pytest.approx(via_m, abs=1e-12)


class TestAdd:
    def test_identity_zero(self):
        mesh = make_l_block()
        pose = rand_pose(np.random.default_rng(2))
        assert add_error(mesh, pose, pose) == 0.0

    def test_pure_translation(self):
        mesh = make_l_block()
        rng = np.random.default_rng(3)
        q, t = rand_pose(rng)
        delta = np.array([3.0, -7.0, 12.0])
        assert add_error(mesh, (q, t), (q, t + delta)) == pytest.approx(
            np.linalg.norm(delta), rel=1e-12
        )

    def test_cube_rotation_matches_enumeration(self):
        # brute force: rotate every vertex and average displacement
        cube = make_plain_cube()
        t = np.array([0.0, 0.0, 700.0])
        q_gt = so3.quat_identity()
        q_est = so3.axis_angle_quat(np.array([0, 0, 1.0]), np.pi / 2)
        r = so3.quat_to_matrix(q_est)
        expect = np.mean(
            [np.linalg.norm(v - (r @ v)) for v in cube.vertices]
        )
        assert add_error(cube, (q_gt, t), (q_est, t)) == pytest.approx(expect, rel=1e-12)

    def test_origin_shift_conjugation_invariance(self):
        mesh = make_l_block()
        rng = np.random.default_rng(4)
        pose_gt, pose_est = rand_pose(rng), rand_pose(rng)
        base = add_error(mesh, pose_gt, pose_est)
        # shift model origin by c and conjugate both poses accordingly
        c = rng.normal(0, 30, 3)
        shifted = mesh.vertices - c

        def conj(pose):
            r = so3.quat_to_matrix(pose[0])
            return (pose[0], pose[1] + r @ c)

        again = add_error(shifted, conj(pose_gt), conj(pose_est))
        assert again == pytest.approx(base, abs=1e-9)


class TestProj2d:
    def test_identity_zero(self):
        cam = Camera.default(64)
        pose = rand_pose(np.random.default_rng(5))
        assert proj2d_error(make_l_block(), cam, pose, pose) == 0.0

    def test_depth_offset_foreshortening(self):
        cam = Camera.default(64)
        mesh = make_l_block()
        q = so3.quat_identity()
        t = np.array([0.0, 0.0, 700.0])
        t2 = np.array([0.0, 0.0, 800.0])
        err = proj2d_error(mesh, cam, (q, t), (q, t2))
        # direct oracle over vertices
        pts = mesh.vertices
        def proj(tv):
            p = pts + tv
            return np.stack([cam.fx * p[:, 0] / p[:, 2] + cam.cx,
                             cam.fy * p[:, 1] / p[:, 2] + cam.cy], axis=1)
        expect = np.linalg.norm(proj(t) - proj(t2), axis=1).mean()
        assert err == pytest.approx(expect, rel=1e-12)
        assert err > 0

    def test_focal_length_linearity(self):
        mesh = make_l_block()
        rng = np.random.default_rng(6)
        pose_gt, pose_est = rand_pose(rng), rand_pose(rng)
        c1 = Camera(fx=175.0, fy=175.0, cx=32, cy=32, width=64, height=64)
        c2 = Camera(fx=350.0, fy=350.0, cx=32, cy=32, width=64, height=64)
        e1 = proj2d_error(mesh, c1, pose_gt, pose_est)
        e2 = proj2d_error(mesh, c2, pose_gt, pose_est)
        assert e2 == pytest.approx(2.0 * e1, rel=1e-9)

    def test_point_behind_camera_raises(self):
        cam = Camera.default(64)
        with pytest.raises(ValueError):
            proj2d_error(
                make_l_block(), cam,
                (so3.quat_identity(), np.array([0, 0, 700.0])),
                (so3.quat_identity(), np.array([0, 0, -700.0])),
            )


def brute_force_vsd(gt, est, scene, tau, eps):
    """Reference per-pixel implementation with explicit python loops."""
    h, w = gt.shape
    union = []
    inter = []
    for r in range(h):
        for c in range(w):
            vg = gt[r, c] > 0 and (scene[r, c] <= 0 or gt[r, c] <= scene[r, c] + eps)
            ve = est[r, c] > 0 and (scene[r, c] <= 0 or est[r, c] <= scene[r, c] + eps)
            if vg or ve:
                union.append((r, c))
                inter.append(vg and ve)
    costs = []
    for (r, c), both in zip(union, inter):
        if not both:
            costs.append(1.0)
        else:
            costs.append(1.0 if abs(gt[r, c] - est[r, c]) >= tau else 0.0)
    return float(np.mean(costs))


class TestVsd:
    def test_identical_depths_zero(self):
        view = render(
            make_l_block(), Camera.default(32),
            (so3.sample_uniform_rotation(np.random.default_rng(7)), np.array([0, 0, 700.0])),
        )
        e, vis = vsd_error(view.depth, view.depth)
        assert e == 0.0
        assert vis == 1.0

    def test_large_depth_shift_is_total_error(self):
        view = render(
            make_plain_cube(), Camera.default(32),
            (so3.quat_identity(), np.array([0, 0, 700.0])),
        )
        shifted = view.depth.copy()
        shifted[shifted > 0] += 100.0  # far beyond tau=20
        e, _ = vsd_error(view.depth, shifted)
        assert e == 1.0

    def test_matches_brute_force_random_maps(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            gt = rng.uniform(600, 800, (16, 16)) * (rng.uniform(size=(16, 16)) > 0.4)
            est = rng.uniform(600, 800, (16, 16)) * (rng.uniform(size=(16, 16)) > 0.4)
            scene = gt.copy()
            e, _ = vsd_error(gt, est, scene)
            expect = brute_force_vsd(gt, est, scene, 20.0, 5.0)
            assert e == pytest.approx(expect, abs=1e-12)

    def test_empty_union_raises(self):
        z = np.zeros((8, 8))
        with pytest.raises(ValueError):
            vsd_error(z, z)

    def test_occluded_scene_reduces_visibility(self):
        view = render(
            make_plain_cube(), Camera.default(32),
            (so3.quat_identity(), np.array([0, 0, 700.0])),
        )
        scene = view.depth.copy()
        h = scene.shape[0]
        occluder = np.zeros_like(scene)
        occluder[: h // 2] = 100.0  # something in front of the top half
        scene_occ = np.where(occluder > 0, occluder, scene)
        _, vis = vsd_error(view.depth, view.depth, scene_occ)
        assert 0.3 < vis < 0.7


class TestRecall:
    def test_all_perfect(self):
        trials = [
            PoseTrial("a", 0.0, 0.0, add_mm=0.0, proj2d_px=0.0, e_vsd=0.0, diameter_mm=200.0)
            for _ in range(5)
        ]
        rep = recall(trials)
        assert all(v == 1.0 for v in rep.recalls.values())

    def test_boundary_inside(self):
        t = PoseTrial("a", np.deg2rad(4.9), 49.0)
        rep = recall([t])
        assert rep.recalls["deg5cm5"] == 1.0

    def test_boundary_outside(self):
        t = PoseTrial("a", np.deg2rad(5.1), 10.0)
        rep = recall([t])
        assert rep.recalls["deg5cm5"] == 0.0

    def test_hand_counted_mixture(self):
        rng = np.random.default_rng(9)
        trials = []
        expect_ok = 0
        for i in range(40):
            e_r = rng.uniform(0, np.deg2rad(10))
            t_err = rng.uniform(0, 100)
            ok = e_r < np.deg2rad(5) and t_err < 50
            expect_ok += ok
            trials.append(PoseTrial("a", e_r, t_err))
        rep = recall(trials)
        assert rep.recalls["deg5cm5"] == pytest.approx(expect_ok / 40)

    def test_low_visibility_excluded_from_vsd(self):
        good = PoseTrial("a", 0.0, 0.0, e_vsd=0.0, visibility=0.9)
        hidden = PoseTrial("a", 0.0, 0.0, e_vsd=1.0, visibility=0.05)
        rep = recall([good, hidden])
        assert rep.recalls["vsd"] == 1.0
        assert rep.counts["vsd_evaluated"] == 1

    def test_tag_breakdown(self):
        a = PoseTrial("x", 0.0, 0.0, tag="trained")
        b = PoseTrial("y", np.pi / 2, 500.0, tag="novel")
        rep = recall([a, b])
        assert rep.by_tag["trained"]["recalls"]["deg5cm5"] == 1.0
        assert rep.by_tag["novel"]["recalls"]["deg5cm5"] == 0.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            recall([])
