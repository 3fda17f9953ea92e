import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hykey.geometry as geo

rng = np.random.default_rng(4242)


def make_scene(n=60, seed=7, planar=False):
    """Two pinhole views of a random box of points, plus exact projections."""
    r = np.random.default_rng(seed)
    K = np.array([[600.0, 0.0, 320.0], [0.0, 600.0, 240.0], [0.0, 0.0, 1.0]])
    X = np.stack([
        r.uniform(-2.0, 2.0, n),
        r.uniform(-1.5, 1.5, n),
        np.full(n, 6.0) if planar else r.uniform(4.0, 8.0, n),
    ], axis=1)
    R0, t0 = np.eye(3), np.zeros(3)
    axis = r.standard_normal(3)
    R1 = geo.rotation_from_axis_angle(axis, np.deg2rad(8.0))
    t1 = np.array([0.8, -0.1, 0.15])

    def project(Rm, tm):
        cam = X @ Rm.T + tm
        pix = cam @ K.T
        return pix[:, :2] / pix[:, 2:3]

    return K, X, (R0, t0), (R1, t1), project(R0, t0), project(R1, t1)


class TestHomography:
    def test_identity_roundtrip(self):
        pts = rng.uniform(0, 100, (10, 2))
        np.testing.assert_allclose(geo.apply_homography(np.eye(3), pts), pts, atol=1e-12)

    def test_dlt_recovers_exact_map(self):
        H = np.array([[1.1, 0.02, 5.0], [-0.03, 0.97, -2.0], [1e-4, -2e-4, 1.0]])
        p0 = rng.uniform(0, 200, (20, 2))
        p1 = geo.apply_homography(H, p0)
        H_est = geo.homography_dlt(p0, p1)
        np.testing.assert_allclose(geo.apply_homography(H_est, p0), p1, atol=1e-6)

    def test_dlt_minimal_sample(self):
        H = np.array([[0.9, 0.1, 3.0], [0.05, 1.05, -1.0], [0.0, 0.0, 1.0]])
        p0 = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 80.0], [100.0, 80.0]])
        p1 = geo.apply_homography(H, p0)
        H_est = geo.homography_dlt(p0, p1)
        np.testing.assert_allclose(H_est, H, atol=1e-8)

    def test_collinear_points_raise(self):
        p0 = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        with pytest.raises(geo.DegenerateGeometryError):
            geo.homography_dlt(p0, p0 * 2.0)

    def test_too_few_points_raise(self):
        with pytest.raises(geo.DegenerateGeometryError):
            geo.homography_dlt(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_robust_fit_with_outliers(self):
        r = np.random.default_rng(11)
        H = np.array([[1.05, -0.04, 12.0], [0.06, 0.93, -7.0], [5e-5, 1e-4, 1.0]])
        p0 = r.uniform(0, 400, (120, 2))
        p1 = geo.apply_homography(H, p0) + r.normal(0, 0.4, (120, 2))
        bad = r.choice(120, 36, replace=False)
        p1[bad] += r.uniform(30, 90, (36, 2)) * r.choice([-1, 1], (36, 2))
        fit = geo.fit_homography(p0, p1, threshold=2.0, rng=r)
        good = np.ones(120, bool)
        good[bad] = False
        # all clean pairs count as inliers and the map reproduces them
        assert fit.inliers[good].mean() > 0.95
        assert fit.inliers[bad].mean() < 0.1
        err = np.linalg.norm(geo.apply_homography(fit.model, p0[good]) - p1[good], axis=1)
        assert np.median(err) < 1.0


class TestSampson:
    def test_closed_form_value(self):
        # F for a pure x-translation; the pair ((0,0),(0,1)) sits half a
        # unit from each epipolar line to first order
        t = np.array([1.0, 0.0, 0.0])
        F = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        d2 = geo.sampson_error(F, np.array([[0.0, 0.0]]), np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(d2, [0.5], rtol=1e-12)

    def test_zero_on_exact_correspondences(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene()
        R, t = geo.relative_pose(R0, t0, R1, t1)
        F = geo.fundamental_from_pose(K, K, R, t)
        d2 = geo.sampson_error(F, p0, p1)
        assert d2.max() < 1e-12


class TestFundamental:
    def test_epipolar_constraint_from_pose(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene(seed=3)
        R, t = geo.relative_pose(R0, t0, R1, t1)
        F = geo.fundamental_from_pose(K, K, R, t)
        resid = np.einsum("ij,ij->i", geo.to_homogeneous(p1), geo.to_homogeneous(p0) @ F.T)
        assert np.abs(resid).max() < 1e-9
        assert abs(np.linalg.norm(F) - 1.0) < 1e-12
        assert np.linalg.matrix_rank(F) == 2

    def test_eight_point_matches_pose_fundamental(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene(seed=5)
        R, t = geo.relative_pose(R0, t0, R1, t1)
        F_gt = geo.fundamental_from_pose(K, K, R, t)
        F = geo.eight_point(p0, p1)
        if np.sign(F[2, 2]) != np.sign(F_gt[2, 2]):
            F = -F
        np.testing.assert_allclose(F, F_gt, atol=1e-8)

    def test_eight_point_needs_eight(self):
        with pytest.raises(geo.DegenerateGeometryError):
            geo.eight_point(np.zeros((7, 2)), np.zeros((7, 2)))

    def test_robust_fit_with_outliers(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene(n=150, seed=9)
        r = np.random.default_rng(13)
        p1 = p1 + r.normal(0, 0.3, p1.shape)
        bad = r.choice(150, 45, replace=False)
        p1[bad] += r.uniform(25, 70, (45, 2)) * r.choice([-1, 1], (45, 2))
        fit = geo.fit_fundamental(p0, p1, threshold=1.0, rng=r)
        good = np.ones(150, bool)
        good[bad] = False
        assert fit.inliers[good].mean() > 0.9
        assert fit.inliers[bad].mean() < 0.1


class TestEssentialPose:
    def test_decomposition_recovers_pose(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene(seed=21)
        R_gt, t_gt = geo.relative_pose(R0, t0, R1, t1)
        F = geo.fundamental_from_pose(K, K, R_gt, t_gt)
        E = geo.essential_from_fundamental(F, K, K)
        R, t = geo.decompose_essential(E, K, K, p0, p1)
        assert geo.rotation_angle_deg(R @ R_gt.T) < 1e-6
        assert geo.translation_angle_deg(t, t_gt) < 1e-6

    def test_pose_error_is_max_of_components(self):
        R_gt = np.eye(3)
        R_est = geo.rotation_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.deg2rad(4.0))
        err = geo.pose_error_deg(R_est, np.array([1.0, 0.0, 0.0]), R_gt, np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(err, 90.0, atol=1e-9)
        err2 = geo.pose_error_deg(R_est, np.array([1.0, 0.0, 0.0]), R_gt, np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(err2, 4.0, atol=1e-9)

    def test_triangulation_roundtrip(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene(seed=2)
        P0 = K @ np.hstack([R0, t0.reshape(3, 1)])
        P1 = K @ np.hstack([R1, t1.reshape(3, 1)])
        Xr = geo.triangulate(P0, P1, p0, p1)
        np.testing.assert_allclose(Xr, X, atol=1e-6)


class TestRotations:
    def test_quarter_turn_about_z(self):
        R = geo.rotation_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.pi / 2)
        np.testing.assert_allclose(R @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    @given(angle=st.floats(0.01, 3.1), seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_angle_roundtrip(self, angle, seed):
        axis = np.random.default_rng(seed).standard_normal(3)
        R = geo.rotation_from_axis_angle(axis, angle)
        assert abs(geo.rotation_angle_deg(R) - np.degrees(angle)) < 1e-6
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)

    def test_zero_axis_gives_identity(self):
        np.testing.assert_array_equal(geo.rotation_from_axis_angle(np.zeros(3), 1.0), np.eye(3))

    def test_normalized_points_center(self):
        K = np.array([[500.0, 0.0, 100.0], [0.0, 500.0, 50.0], [0.0, 0.0, 1.0]])
        q = geo.normalized_points(np.array([[100.0, 50.0], [600.0, 50.0]]), K, focal_scale=500.0)
        np.testing.assert_allclose(q, [[0.0, 0.0], [500.0, 0.0]], atol=1e-12)


class TestEstimateRelativePose:
    def test_exact_correspondences(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene(n=80, seed=11)
        R, t, inliers = geo.estimate_relative_pose(p0, p1, K, K, rng=np.random.default_rng(0))
        R_gt, t_gt = geo.relative_pose(R0, t0, R1, t1)
        assert geo.pose_error_deg(R, t, R_gt, t_gt) < 0.1
        assert inliers.sum() >= 76

    def test_outlier_contamination(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene(n=120, seed=3)
        r = np.random.default_rng(9)
        bad = r.permutation(120)[:40]
        p1 = p1.copy()
        p1[bad] = r.uniform([0, 0], [640, 480], (40, 2))
        R, t, inliers = geo.estimate_relative_pose(p0, p1, K, K, rng=np.random.default_rng(1))
        R_gt, t_gt = geo.relative_pose(R0, t0, R1, t1)
        assert geo.pose_error_deg(R, t, R_gt, t_gt) < 1.0
        # nearly all planted outliers rejected
        assert inliers[bad].sum() <= 4

    def test_distinct_intrinsics(self):
        K, X, (R0, t0), (R1, t1), p0, p1 = make_scene(n=80, seed=21)
        K1 = K.copy()
        K1[0, 0] = K1[1, 1] = 750.0
        cam = X @ R1.T + t1
        pix = cam @ K1.T
        p1 = pix[:, :2] / pix[:, 2:3]
        R, t, _ = geo.estimate_relative_pose(p0, p1, K, K1, rng=np.random.default_rng(2))
        R_gt, t_gt = geo.relative_pose(R0, t0, R1, t1)
        assert geo.pose_error_deg(R, t, R_gt, t_gt) < 0.1

    def test_too_few_matches_raise(self):
        K = np.array([[600.0, 0.0, 320.0], [0.0, 600.0, 240.0], [0.0, 0.0, 1.0]])
        p = np.random.default_rng(0).uniform(0, 500, (7, 2))
        with pytest.raises(geo.DegenerateGeometryError):
            geo.estimate_relative_pose(p, p + 1.0, K, K)
