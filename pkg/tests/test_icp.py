import numpy as np
import pytest

from mppose import so3
from mppose.icp import (
    depth_normals,
    depth_to_points,
    icp_point_to_plane,
    sample_surface_points,
)
from mppose.mesh import make_l_block, make_plain_cube
from mppose.refine import PoseEstimate
from mppose.render import Camera, render

CAM = Camera.default(128)
T0 = np.array([0.0, 0.0, 700.0])


@pytest.fixture(scope="module")
def scene():
    mesh = make_l_block()
    q = so3.sample_uniform_rotation(np.random.default_rng(0))
    view = render(mesh, CAM, (q, T0))
    src, src_n = sample_surface_points(mesh, 1500, np.random.default_rng(1))
    return mesh, q, view, src, src_n


class TestDepthGeometry:
    def test_backprojection_inverts_projection(self, scene):
        _, _, view, _, _ = scene
        pts = depth_to_points(view.depth, CAM)
        rows, cols = np.nonzero(view.mask)
        r, c = rows[10], cols[10]
        p = pts[r, c]
        u = CAM.fx * p[0] / p[2] + CAM.cx
        v = CAM.fy * p[1] / p[2] + CAM.cy
        assert u == pytest.approx(c, abs=1e-9)
        assert v == pytest.approx(r, abs=1e-9)

    def test_normals_unit_and_camera_facing(self, scene):
        _, _, view, _, _ = scene
        normals = depth_normals(view.depth, CAM)
        pts = depth_to_points(view.depth, CAM)
        ok = np.isfinite(normals).all(axis=2)
        assert ok.sum() > 100
        lens = np.linalg.norm(normals[ok], axis=1)
        assert np.allclose(lens, 1.0, atol=1e-9)
        dots = (normals[ok] * pts[ok]).sum(axis=1)
        assert (dots <= 1e-9).all()

    def test_flat_face_normal_points_at_camera(self):
        view = render(make_plain_cube(), CAM, (so3.quat_identity(), T0))
        normals = depth_normals(view.depth, CAM)
        center = normals[64, 64]
        assert np.allclose(center, [0, 0, -1], atol=1e-6)


class TestSurfaceSampling:
    def test_points_on_surface(self):
        mesh = make_plain_cube()
        pts, _ = sample_surface_points(mesh, 500, np.random.default_rng(2))
        # every cube surface point has max |coordinate| = half side
        assert np.allclose(np.abs(pts).max(axis=1), 70.0, atol=1e-9)

    def test_deterministic(self):
        mesh = make_l_block()
        a, an = sample_surface_points(mesh, 100, np.random.default_rng(3))
        b, bn = sample_surface_points(mesh, 100, np.random.default_rng(3))
        assert np.array_equal(a, b) and np.array_equal(an, bn)


class TestIcp:
    def test_fixed_point_at_ground_truth(self, scene):
        mesh, q, view, src, src_n = scene
        out = icp_point_to_plane(src, view.depth, CAM, PoseEstimate(q=q, t=T0), src_normals=src_n)
        assert so3.geodesic_angle(out.q, q) < np.deg2rad(0.05)
        assert np.linalg.norm(out.t - T0) < 0.05

    def test_residuals_zero_at_truth(self, scene):
        mesh, q, view, src, src_n = scene
        from mppose.icp import _associate

        rot = so3.quat_to_matrix(q)
        normals = depth_normals(view.depth, CAM)
        pts = depth_to_points(view.depth, CAM)
        assoc = _associate(src, rot, T0, pts, normals, CAM, src_n)
        assert assoc is not None
        # point-to-plane residuals vanish on clean synthetic depth up to
        # rasterization quantization
        assert np.median(np.abs(assoc.residuals)) < 0.75

    def test_recovers_known_offset(self, scene):
        mesh, q, view, src, src_n = scene
        dq = so3.axis_angle_quat(np.array([0.3, 0.5, -0.2]) / np.linalg.norm([0.3, 0.5, -0.2]), np.deg2rad(5))
        init = PoseEstimate(q=so3.quat_mul(dq, q), t=T0 + [5.0, -4.0, 18.0])
        out = icp_point_to_plane(src, view.depth, CAM, init, src_normals=src_n)
        assert so3.geodesic_angle(out.q, q) < np.deg2rad(0.1)
        assert np.linalg.norm(out.t - T0) < 1.0

    def test_robust_to_salt_outliers(self, scene):
        mesh, q, view, src, src_n = scene
        rng = np.random.default_rng(4)
        depth = view.depth.copy()
        mask = depth > 0
        salt = mask & (rng.uniform(size=depth.shape) < 0.2)
        depth[salt] = rng.uniform(300, 1200, salt.sum())
        dq = so3.axis_angle_quat(np.array([0, 0, 1.0]), np.deg2rad(5))
        init = PoseEstimate(q=so3.quat_mul(dq, q), t=T0 + [0.0, 0.0, 20.0])
        out = icp_point_to_plane(src, depth, CAM, init, src_normals=src_n)
        assert so3.geodesic_angle(out.q, q) < np.deg2rad(1.0)
        assert np.linalg.norm(out.t - T0) < 3.0

    def test_insufficient_depth_raises(self, scene):
        mesh, q, _, src, src_n = scene
        with pytest.raises(ValueError):
            icp_point_to_plane(src, np.zeros((64, 64)), Camera.default(64), PoseEstimate(q=q, t=T0), src_normals=src_n)
