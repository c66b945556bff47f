import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dysplat.errors import DegenerateRotation6D, NonPositiveDepth, ValidationError
from dysplat.geometry import (
    SE3Transform,
    ewa_backward,
    ewa_project_covariance,
    ewa_project_covariance_batch,
    interpolate_se3,
    matrix_to_quat,
    matrix_to_rot6d,
    project,
    project_points,
    projection_backward,
    quat_to_matrix,
    quat_vjp,
    rot6d_to_matrix,
    rot6d_vjp,
    unproject,
    unproject_grid,
    warp,
)

from conftest import central_diff, make_cam


def rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])


class TestProject:
    def test_optical_axis(self, simple_cam):
        pix, z = project([0.0, 0.0, 1.0], simple_cam)
        assert np.allclose(pix, [50.0, 50.0])
        assert z == 1.0

    def test_pinhole_arithmetic(self, simple_cam):
        pix, z = project([1.0, 0.0, 2.0], simple_cam)
        assert np.allclose(pix, [100.0, 50.0])
        assert z == 2.0

    def test_behind_camera(self, simple_cam):
        with pytest.raises(NonPositiveDepth):
            project([0.0, 0.0, -1.0], simple_cam)

    def test_unproject_examples(self, simple_cam):
        assert np.allclose(unproject([50.0, 50.0], 1.0, simple_cam), [0.0, 0.0, 1.0])
        assert np.allclose(unproject([100.0, 50.0], 2.0, simple_cam), [1.0, 0.0, 2.0])
        with pytest.raises(NonPositiveDepth):
            unproject([10.0, 10.0], 0.0, simple_cam)

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        # random but valid extrinsics
        R = rot6d_to_matrix(rng.normal(size=6))
        cam = make_cam(fx=123.0, fy=87.0, cx=40.0, cy=60.0, rotation=R,
                       translation=rng.normal(size=3))
        worst = 0.0
        for _ in range(1000):
            pix = rng.uniform(0, 99, size=2)
            depth = rng.uniform(1e-3, 50.0)
            point = unproject(pix, depth, cam)
            pix2, d2 = project(point, cam)
            worst = max(worst, np.max(np.abs(pix2 - pix)), abs(d2 - depth))
        assert worst <= 1e-9

    def test_batched_matches_scalar(self, simple_cam):
        rng = np.random.default_rng(1)
        pts = rng.uniform([-1, -1, 0.5], [1, 1, 5], size=(32, 3))
        pix, z, valid = project_points(pts, simple_cam)
        assert valid.all()
        for k in range(32):
            p, d = project(pts[k], simple_cam)
            assert np.allclose(pix[k], p) and np.isclose(z[k], d)

    def test_unproject_grid(self, simple_cam):
        depth = np.full((4, 6), 2.5)
        pts = unproject_grid(depth, simple_cam)
        assert pts.shape == (4, 6, 3)
        pix, z = project(pts[2, 3], simple_cam)
        assert np.allclose(pix, [3.0, 2.0]) and np.isclose(z, 2.5)


class TestWarp:
    def test_zero_flow_identity(self):
        rng = np.random.default_rng(2)
        field = rng.normal(size=(5, 7, 3))
        out, valid = warp(field, np.zeros((5, 7, 2)))
        assert np.allclose(out, field)
        assert valid.all()

    def test_linear_ramp_exact(self):
        H, W = 6, 8
        field = np.tile(np.arange(W, dtype=np.float64), (H, 1))
        flow = np.zeros((H, W, 2))
        flow[..., 0] = 1.0
        out, valid = warp(field, flow)
        assert np.allclose(out[:, :-1], field[:, :-1] + 1.0)
        assert valid[:, :-1].all() and not valid[:, -1].any()

    def test_all_outside(self):
        field = np.ones((4, 4))
        flow = np.full((4, 4, 2), 100.0)
        _, valid = warp(field, flow)
        assert not valid.any()

    def test_subpixel_bilinear(self):
        field = np.array([[0.0, 1.0], [0.0, 1.0]])
        flow = np.zeros((2, 2, 2))
        flow[0, 0, 0] = 0.25
        out, valid = warp(field, flow)
        assert np.isclose(out[0, 0], 0.25) and valid[0, 0]


class TestRot6d:
    def test_already_orthonormal(self):
        R = rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1.0, 0]))
        assert np.allclose(R, np.eye(3))

    def test_gram_schmidt_by_hand(self):
        R = rot6d_to_matrix(np.array([1.0, 0, 0, 1.0, 1.0, 0]))
        assert np.allclose(R, np.eye(3))

    def test_zero_a1_degenerate(self):
        with pytest.raises(DegenerateRotation6D):
            rot6d_to_matrix(np.zeros(6))

    def test_parallel_degenerate(self):
        with pytest.raises(DegenerateRotation6D):
            rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_output_is_rotation(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=6)
        R = rot6d_to_matrix(a)
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-10
        assert abs(np.linalg.det(R) - 1.0) < 1e-10

    def test_vjp_matches_fd(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=6)
            G = rng.normal(size=(3, 3))

            def f(x):
                return float(np.sum(rot6d_to_matrix(x) * G))

            fd = central_diff(f, a.copy())
            an = rot6d_vjp(a, G)
            assert np.allclose(an, fd, rtol=1e-5, atol=1e-7)


class TestQuat:
    def test_round_trip(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(16, 4))
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        R = quat_to_matrix(q)
        q2 = matrix_to_quat(R)
        # q and -q are the same rotation
        dots = np.abs(np.sum(q * q2, axis=-1))
        assert np.allclose(dots, 1.0, atol=1e-9)

    def test_vjp_matches_fd(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            q = rng.normal(size=4) * 1.3
            G = rng.normal(size=(3, 3))

            def f(x):
                return float(np.sum(quat_to_matrix(x) * G))

            fd = central_diff(f, q.copy())
            an = quat_vjp(q, G)
            assert np.allclose(an, fd, rtol=1e-5, atol=1e-7)


class TestInterpolateSE3:
    def test_endpoints_exact(self):
        rng = np.random.default_rng(6)
        Ta = SE3Transform(rot6d_to_matrix(rng.normal(size=6)), rng.normal(size=3))
        Tb = SE3Transform(rot6d_to_matrix(rng.normal(size=6)), rng.normal(size=3))
        assert interpolate_se3(Ta, Tb, 0.0) is Ta
        assert interpolate_se3(Ta, Tb, 1.0) is Tb

    def test_translation_midpoint(self):
        Ta = SE3Transform(np.eye(3), np.zeros(3))
        Tb = SE3Transform(np.eye(3), np.array([2.0, 0, 0]))
        Tm = interpolate_se3(Ta, Tb, 0.5)
        assert np.allclose(Tm.translation, [1.0, 0, 0])
        assert np.allclose(Tm.rotation, np.eye(3))

    def test_planar_bisection(self):
        # symmetric 6D blend of two z-rotations bisects the angle
        Ta = SE3Transform(rot_z(0.0), np.zeros(3))
        Tb = SE3Transform(rot_z(90.0), np.zeros(3))
        Tm = interpolate_se3(Ta, Tb, 0.5)
        assert np.allclose(Tm.rotation, rot_z(45.0), atol=1e-9)

    def test_out_of_range(self):
        T = SE3Transform.identity()
        with pytest.raises(ValidationError):
            interpolate_se3(T, T, 1.5)


class TestEWA:
    def test_on_axis_isotropic(self, simple_cam):
        sigma2 = 0.16
        for z in (1.0, 2.0, 5.0):
            out = ewa_project_covariance(sigma2 * np.eye(3), simple_cam, [0.0, 0.0, z])
            expect = (100.0**2 * sigma2 / z**2) * np.eye(2) + 0.3 * np.eye(2)
            assert np.allclose(out, expect)

    def test_zero_cov_dilation_floor(self, simple_cam):
        out = ewa_project_covariance(np.zeros((3, 3)), simple_cam, [0.0, 0.0, 1.0])
        assert np.allclose(out, 0.3 * np.eye(2))

    def test_depth_doubling_quarters(self, simple_cam):
        sigma2 = 0.25
        a = ewa_project_covariance(sigma2 * np.eye(3), simple_cam, [0.0, 0.0, 1.0]) - 0.3 * np.eye(2)
        b = ewa_project_covariance(sigma2 * np.eye(3), simple_cam, [0.0, 0.0, 2.0]) - 0.3 * np.eye(2)
        assert np.allclose(b, a / 4.0)

    def test_behind_camera(self, simple_cam):
        with pytest.raises(NonPositiveDepth):
            ewa_project_covariance(np.eye(3), simple_cam, [0.0, 0.0, -1.0])

    def test_output_positive_definite(self):
        rng = np.random.default_rng(7)
        R = rot6d_to_matrix(rng.normal(size=6))
        cam = make_cam(rotation=R, translation=rng.normal(size=3) * 0.1)
        for _ in range(200):
            A = rng.normal(size=(3, 3))
            cov = A @ A.T * rng.uniform(0.001, 1.0)
            mean_cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.2, 10)])
            mean_world = cam.camera_to_world(mean_cam)
            out = ewa_project_covariance(cov, cam, cam.world_to_camera(mean_world))
            evals = np.linalg.eigvalsh(out)
            assert np.all(evals >= 0.3 - 1e-12)
            assert np.allclose(out, out.T)

    def test_batch_matches_scalar(self, simple_cam):
        rng = np.random.default_rng(8)
        covs = np.array([a @ a.T for a in rng.normal(size=(5, 3, 3))])
        means = rng.uniform([-1, -1, 1], [1, 1, 5], size=(5, 3))
        out, _ = ewa_project_covariance_batch(
            covs, np.eye(3), means, 100.0, 100.0)
        for k in range(5):
            ref = ewa_project_covariance(covs[k], simple_cam, means[k])
            assert np.allclose(out[k], ref)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(9)
        R_w2c = rot6d_to_matrix(rng.normal(size=6))
        fx, fy = 90.0, 110.0
        A = rng.normal(size=(3, 3))
        cov = (A @ A.T)[None]
        mean = np.array([[0.3, -0.2, 2.5]])
        G = rng.normal(size=(1, 2, 2))

        def f_cov(c):
            out, _ = ewa_project_covariance_batch(c.reshape(1, 3, 3), R_w2c, mean, fx, fy)
            return float(np.sum(out * G))

        def f_mean(m):
            out, _ = ewa_project_covariance_batch(cov, R_w2c, m.reshape(1, 3), fx, fy)
            return float(np.sum(out * G))

        _, J = ewa_project_covariance_batch(cov, R_w2c, mean, fx, fy)
        g_cov, g_mean = ewa_backward(G, cov, R_w2c, mean, fx, fy, J)
        assert np.allclose(g_cov.reshape(-1), central_diff(f_cov, cov.copy().reshape(-1)), rtol=1e-5, atol=1e-7)
        assert np.allclose(g_mean.reshape(-1), central_diff(f_mean, mean.copy().reshape(-1)), rtol=1e-5, atol=1e-7)

    def test_projection_backward_matches_fd(self):
        rng = np.random.default_rng(10)
        fx, fy = 77.0, 101.0
        mean = np.array([[0.4, 0.1, 3.0]])
        gp = rng.normal(size=(1, 2))
        gz = rng.normal(size=(1,))

        def f(m):
            x, y, z = m.reshape(3)
            pix = np.array([fx * x / z, fy * y / z])
            return float(np.sum(pix * gp[0]) + z * gz[0])

        an = projection_backward(gp, gz, mean, fx, fy)
        fd = central_diff(f, mean.copy().reshape(-1))
        assert np.allclose(an.reshape(-1), fd, rtol=1e-6, atol=1e-9)


class TestSE3Type:
    def test_compose_apply_inverse(self):
        rng = np.random.default_rng(11)
        A = SE3Transform(rot6d_to_matrix(rng.normal(size=6)), rng.normal(size=3))
        B = SE3Transform(rot6d_to_matrix(rng.normal(size=6)), rng.normal(size=3))
        p = rng.normal(size=3)
        assert np.allclose(A.compose(B).apply(p), A.apply(B.apply(p)))
        assert np.allclose(A.compose(A.inverse()).apply(p), p)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValidationError):
            SE3Transform(np.eye(3) * 2.0, np.zeros(3))

    def test_rot6d_round_trips_rotation(self):
        rng = np.random.default_rng(12)
        R = rot6d_to_matrix(rng.normal(size=6))
        assert np.allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)
