import numpy as np
import pytest
from scipy import stats

from mppose import so3


def random_quat(rng):
    return so3.quat_canonical(rng.normal(size=4))


class TestQuatMul:
    def test_identity(self):
        rng = np.random.default_rng(1)
        q = random_quat(rng)
        assert np.allclose(so3.quat_mul(so3.quat_identity(), q), q, atol=1e-12)

    def test_axis_composition(self):
        z = np.array([0.0, 0.0, 1.0])
        q90 = so3.axis_angle_quat(z, np.pi / 2)
        q180 = so3.axis_angle_quat(z, np.pi)
        assert np.allclose(so3.quat_mul(q90, q90), q180, atol=1e-12)

    def test_matches_matrix_product(self):
        # oracle: composition of rotations is the product of their matrices
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = random_quat(rng), random_quat(rng)
            lhs = so3.quat_to_matrix(so3.quat_mul(a, b))
            rhs = so3.quat_to_matrix(a) @ so3.quat_to_matrix(b)
            assert np.abs(lhs - rhs).max() < 1e-9


class TestAxisAngle:
    def test_zero_angle(self):
        q = so3.axis_angle_quat(np.array([0, 0, 1.0]), 0.0)
        assert np.allclose(q, so3.quat_identity())

    def test_half_turn(self):
        q = so3.axis_angle_quat(np.array([0, 0, 1.0]), np.pi)
        assert np.allclose(q, [0, 0, 0, 1], atol=1e-12)

    def test_zero_axis_rejected(self):
        with pytest.raises(ValueError):
            so3.axis_angle_quat(np.zeros(3), 0.3)

    def test_angle_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            alpha = rng.uniform(1e-3, np.pi - 1e-3)
            q = so3.axis_angle_quat(axis, alpha)
            assert so3.geodesic_angle(q, so3.quat_identity()) == pytest.approx(alpha, abs=1e-9)


class TestGeodesicAngle:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(4)
        q = random_quat(rng)
        assert so3.geodesic_angle(q, q) == pytest.approx(0.0, abs=1e-7)

    def test_quarter_turn(self):
        q = so3.axis_angle_quat(np.array([1.0, 0, 0]), np.pi / 2)
        assert so3.geodesic_angle(so3.quat_identity(), q) == pytest.approx(np.pi / 2, abs=1e-12)

    def test_quaternion_dot_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a, b = random_quat(rng), random_quat(rng)
            expect = 2.0 * np.arccos(min(1.0, abs(float(np.dot(a, b)))))
            assert so3.geodesic_angle(a, b) == pytest.approx(expect, abs=1e-9)

    def test_metric_properties(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a, b, c = (random_quat(rng) for _ in range(3))
            dab, dba = so3.geodesic_angle(a, b), so3.geodesic_angle(b, a)
            assert dab == pytest.approx(dba, abs=1e-9)
            assert so3.geodesic_angle(a, c) <= dab + so3.geodesic_angle(b, c) + 1e-9


class TestMatrixConversion:
    def test_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            m = so3.quat_to_matrix(random_quat(rng))
            back = so3.quat_to_matrix(so3.matrix_to_quat(m))
            assert np.abs(back - m).max() < 1e-9

    def test_matrix_is_special_orthogonal(self):
        rng = np.random.default_rng(8)
        m = so3.quat_to_matrix(random_quat(rng))
        assert np.abs(m.T @ m - np.eye(3)).max() < 1e-9
        assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-9)


class TestCanonicalSign:
    def test_negation_collapses(self):
        rng = np.random.default_rng(9)
        q = random_quat(rng)
        assert np.allclose(so3.quat_canonical(-q), q)

    def test_w_zero_tie(self):
        q = so3.quat_canonical(np.array([0.0, -0.6, 0.8, 0.0]))
        assert q[1] > 0


# Haar density of the rotation angle is (1 - cos t) / pi on [0, pi]; the
# reference statistics below follow by direct integration.
UNIFORM_MEAN_ANGLE = np.pi / 2 + 2 / np.pi  # = 2.2074...
FRAC_BELOW_HALF_PI = 0.5 - 1 / np.pi  # = 0.1817...


def _angle_cdf(t):
    return (t - np.sin(t)) / np.pi


@pytest.fixture(scope="module")
def angles():
    rng = np.random.default_rng(1234)
    q = so3.sample_uniform_rotation(rng, n=100_000)
    return 2.0 * np.arccos(np.clip(np.abs(q[:, 0]), 0, 1))


class TestUniformSampling:
    def test_mean_angle(self, angles):
        assert abs(angles.mean() - UNIFORM_MEAN_ANGLE) < 0.01

    def test_fraction_below_half_pi(self, angles):
        assert abs((angles < np.pi / 2).mean() - FRAC_BELOW_HALF_PI) < 0.01

    def test_angle_density_chi2(self, angles):
        edges = np.linspace(0, np.pi, 19)
        observed, _ = np.histogram(angles, bins=edges)
        expected = len(angles) * np.diff(_angle_cdf(edges))
        chi2 = ((observed - expected) ** 2 / expected).sum()
        p = stats.chi2.sf(chi2, df=len(observed) - 1)
        assert p > 0.01

    def test_reproducible(self):
        a = so3.sample_uniform_rotation(np.random.default_rng(7), n=10)
        b = so3.sample_uniform_rotation(np.random.default_rng(7), n=10)
        assert np.array_equal(a, b)


class TestViewGrid:
    def test_icosahedron_count(self):
        grid = so3.build_view_grid(0, 1)
        assert len(grid) == 12
        assert grid.num_viewpoints == 12

    def test_full_grid_count(self):
        grid = so3.build_view_grid(4, 36)
        assert len(grid) == 92232

    def test_entries_distinct(self):
        grid = so3.build_view_grid(2, 12)
        assert len(grid) == 1944
        dots = np.abs(grid.quats @ grid.quats.T)
        np.fill_diagonal(dots, 0.0)
        min_sep = 2.0 * np.arccos(np.clip(dots.max(), 0, 1))
        assert min_sep > 1e-6

    def test_deterministic(self):
        a = so3.build_view_grid(1, 4).quats
        b = so3.build_view_grid(1, 4).quats
        assert np.array_equal(a, b)

    def test_unit_and_canonical(self):
        grid = so3.build_view_grid(1, 8)
        assert np.abs(np.linalg.norm(grid.quats, axis=1) - 1).max() < 1e-9
        assert np.allclose(grid.quats, so3.quat_canonical(grid.quats), atol=1e-12)
        # sign canonicalization: first component above tolerance is positive
        for q in grid.quats:
            lead = q[np.abs(q) > 1e-12][0]
            assert lead > 0

    def test_viewpoints_cover_directions(self):
        # entry i*p maps its icosphere direction onto the camera axis
        dirs = so3.icosphere_vertices(1)
        grid = so3.build_view_grid(1, 6)
        for i in [0, 7, 23]:
            q = grid.quats[i * 6]
            mapped = so3.quat_rotate(q, dirs[i])
            assert np.allclose(mapped, [0, 0, -1], atol=1e-9)


class TestPerturbation:
    def test_small_sigma_near_identity(self):
        rng = np.random.default_rng(10)
        q = so3.sample_perturbation(1e-9, rng)
        assert so3.geodesic_angle(q, so3.quat_identity()) < 1e-6

    def test_angle_rms_matches_sigma(self):
        rng = np.random.default_rng(11)
        sigma = np.deg2rad(45.0)
        angles = np.empty(100_000)
        for i in range(len(angles)):
            q = so3.sample_perturbation(sigma, rng)
            angles[i] = 2.0 * np.arccos(min(1.0, abs(q[0])))
        # E[alpha^2] = sigma^2 for alpha ~ N(0, sigma^2), so the RMS of the
        # recovered |alpha| estimates sigma
        rms = np.sqrt((angles**2).mean())
        assert abs(np.rad2deg(rms) - 45.0) < 2.0

    def test_composition_stays_unit(self):
        rng = np.random.default_rng(12)
        q = random_quat(rng)
        for _ in range(20):
            q = so3.quat_mul(so3.sample_perturbation(0.3, rng), q)
        assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-9)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            so3.sample_perturbation(0.0, np.random.default_rng(0))


class TestEvalPerturbation:
    def test_angle_never_exceeds_45deg(self):
        rng = np.random.default_rng(13)
        dq, _ = so3.sample_eval_perturbations(rng, 10_000)
        angles = 2.0 * np.arccos(np.clip(np.abs(dq[:, 0]), 0, 1))
        assert angles.max() <= np.deg2rad(45.0) + 1e-12

    def test_translation_stds(self):
        rng = np.random.default_rng(14)
        _, dt = so3.sample_eval_perturbations(rng, 100_000)
        assert abs(dt[:, 2].std() - 50.0) < 2.0
        assert abs(dt[:, 0].std() - 10.0) < 0.5
        assert abs(dt[:, 1].std() - 10.0) < 0.5

    def test_scalar_api_reproducible(self):
        a = so3.sample_eval_perturbation(np.random.default_rng(15))
        b = so3.sample_eval_perturbation(np.random.default_rng(15))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_grid_spacing_reasonable():
    grid = so3.build_view_grid(2, 12)
    spacing = so3.grid_spacing(grid, sample=256)
    # icosphere level 2 has ~16 deg viewpoint spacing, in-plane 30 deg
    assert np.deg2rad(5) < spacing < np.deg2rad(30)
