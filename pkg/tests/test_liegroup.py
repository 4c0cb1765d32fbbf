import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossloc import liegroup as lg

from oracles import matrix_exp_series, numeric_jacobian, se3_hat


def random_twist(rng, rot_scale=1.0, trans_scale=1.0):
    phi = rng.normal(size=3)
    phi *= rot_scale * rng.uniform(0, 1) / np.linalg.norm(phi)
    rho = rng.normal(size=3) * trans_scale
    return np.concatenate([phi, rho])


class TestExp:
    def test_zero_twist_is_identity(self):
        p = lg.se3_exp(np.zeros(6))
        assert np.allclose(p.rotation, np.eye(3), atol=1e-15)
        assert np.allclose(p.translation, 0.0, atol=1e-15)

    def test_quarter_turn_about_z(self):
        p = lg.se3_exp(np.array([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0]))
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.allclose(p.rotation, expected, atol=1e-12)
        assert np.allclose(p.translation, 0.0, atol=1e-15)

    def test_matches_matrix_exponential_series(self):
        xi = np.array([0.1, 0.2, 0.3, 1.0, 2.0, 3.0])
        oracle = matrix_exp_series(se3_hat(xi), terms=20)
        assert np.allclose(lg.se3_exp(xi).matrix(), oracle, atol=1e-10)

    def test_small_angle_branch_continuous(self):
        # values straddling the series/trig switch agree
        for theta in (9.9e-7, 1.1e-6):
            xi = np.array([theta, 0.0, 0.0, 0.5, 0.0, 0.0])
            oracle = matrix_exp_series(se3_hat(xi), terms=20)
            assert np.allclose(lg.se3_exp(xi).matrix(), oracle, atol=1e-14)


class TestLog:
    def test_identity(self):
        assert np.allclose(lg.se3_log(lg.Pose.identity()), 0.0, atol=1e-15)

    def test_round_trip_half_radian(self):
        xi = np.array([0.3, -0.4, 0.0, 1.0, -2.0, 0.5])
        xi[:3] *= 0.5 / np.linalg.norm(xi[:3])
        assert np.allclose(lg.se3_log(lg.se3_exp(xi)), xi, atol=1e-9)

    def test_matches_numerical_inversion(self):
        # Gauss-Newton on xi -> vec(exp(xi) - target) with FD Jacobian:
        # inverts exp without touching the closed-form log.
        target = lg.Pose(lg.rot_z(np.pi / 2), np.array([1.0, 0.0, 0.0]))

        def residual(xi):
            return (lg.se3_exp(xi).matrix() - target.matrix())[:3, :].ravel()

        xi = np.zeros(6)
        for _ in range(50):
            jac = numeric_jacobian(residual, xi, eps=1e-7)
            step = np.linalg.lstsq(jac, -residual(xi), rcond=None)[0]
            xi = xi + step
            if np.linalg.norm(step) < 1e-12:
                break
        assert np.allclose(lg.se3_log(target), xi, atol=1e-8)

    def test_angle_near_pi_raises(self):
        almost_pi = (np.pi - 1e-9) * np.array([1.0, 0.0, 0.0])
        pose = lg.Pose(lg.so3_exp(almost_pi), np.zeros(3))
        with pytest.raises(lg.AngleNearPiError):
            lg.se3_log(pose)


class TestRightJacobian:
    def test_zero_angle_is_identity(self):
        assert np.allclose(lg.so3_right_jacobian(np.zeros(3)), np.eye(3), atol=1e-15)

    def test_defining_relation_finite_difference(self):
        phi = np.array([0.2, -0.1, 0.3])

        def f(delta):
            # so3_log of Exp(phi)^T Exp(phi + delta) equals J_r @ delta + O(|d|^2)
            return lg.so3_log(lg.so3_exp(phi).T @ lg.so3_exp(phi + delta))

        fd = numeric_jacobian(f, np.zeros(3), eps=1e-6)
        assert np.allclose(lg.so3_right_jacobian(phi), fd, atol=1e-6)

    def test_inverse_consistency(self):
        phi = np.array([0.2, -0.1, 0.3])
        prod = lg.so3_right_jacobian(phi) @ lg.so3_right_jacobian_inv(phi)
        assert np.allclose(prod, np.eye(3), atol=1e-10)


class TestSe3Jacobians:
    def test_left_jacobian_defining_relation(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            xi = random_twist(rng, rot_scale=1.5, trans_scale=2.0)

            def f(delta, xi=xi):
                return lg.se3_log(lg.se3_exp(xi + delta) @ lg.se3_exp(xi).inverse())

            fd = numeric_jacobian(f, np.zeros(6), eps=1e-6)
            assert np.allclose(lg.se3_left_jacobian(xi), fd, atol=5e-5)

    def test_right_jacobian_inverse(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            xi = random_twist(rng, rot_scale=1.5, trans_scale=2.0)
            prod = lg.se3_right_jacobian(xi) @ lg.se3_right_jacobian_inv(xi)
            assert np.allclose(prod, np.eye(6), atol=1e-9)


class TestProperties:
    def test_exp_log_round_trip_bulk(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(10_000):
            xi = random_twist(rng, rot_scale=3.0, trans_scale=5.0)
            err = np.max(np.abs(lg.se3_log(lg.se3_exp(xi)) - xi))
            worst = max(worst, err)
        assert worst < 1e-8

    def test_group_action_matches_parts(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            pose = lg.se3_exp(random_twist(rng, 2.0, 3.0))
            pt = rng.normal(size=3)
            assert np.allclose(
                pose.apply(pt), pose.rotation @ pt + pose.translation, atol=1e-12
            )

    def test_adjoint_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            pose = lg.se3_exp(random_twist(rng, 1.5, 2.0))
            xi = random_twist(rng, 0.5, 1.0)
            lhs = lg.se3_exp(pose.adjoint() @ xi)
            rhs = pose @ lg.se3_exp(xi) @ pose.inverse()
            assert np.allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(5)
        pose = lg.se3_exp(random_twist(rng, 2.0, 4.0))
        ident = pose @ pose.inverse()
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(ident.translation, 0.0, atol=1e-9)

    def test_orthonormal_after_long_composition_chain(self):
        rng = np.random.default_rng(6)
        pose = lg.Pose.identity()
        step = lg.se3_exp(random_twist(rng, 0.01, 0.01))
        for _ in range(10_000):
            pose = pose @ step
        gram = pose.rotation @ pose.rotation.T
        assert np.linalg.norm(gram - np.eye(3)) < 1e-9
        assert abs(np.linalg.det(pose.rotation) - 1.0) < 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-2.0, 2.0), min_size=6, max_size=6))
    def test_apply_batch_matches_single(self, vals):
        xi = np.array(vals)
        if np.linalg.norm(xi[:3]) > np.pi - 0.2:
            xi[:3] *= (np.pi - 0.2) / np.linalg.norm(xi[:3])
        pose = lg.se3_exp(xi)
        pts = np.arange(12.0).reshape(4, 3)
        batch = pose.apply(pts)
        for i in range(4):
            assert np.allclose(batch[i], pose.apply(pts[i]), atol=1e-12)


class TestQuaternion:
    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            rot = lg.so3_exp(random_twist(rng, 3.1, 0.0)[:3])
            back = lg.rotation_from_quat(lg.quat_from_rotation(rot))
            assert np.allclose(back, rot, atol=1e-12)

    def test_identity_quaternion(self):
        assert np.allclose(lg.quat_from_rotation(np.eye(3)), [0, 0, 0, 1], atol=1e-15)
