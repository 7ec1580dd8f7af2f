import math

import numpy as np
import pytest

from voxlo.geometry import (
    Pose3,
    Rot3,
    Tangent6,
    Twist,
    jac_point_action,
    quaternion_from_rotation,
    random_rotation,
    rotation_from_quaternion,
    se3_adjoint,
    se3_boxplus,
    se3_compose,
    se3_exp,
    se3_left_jacobian,
    se3_log,
    se3_right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
)


def matrix_exp_series(a: np.ndarray, terms: int = 20) -> np.ndarray:
    """Independent oracle: truncated matrix exponential."""
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for n in range(1, terms + 1):
        term = term @ a / n
        out = out + term
    return out


def se3_exp_oracle(xi: np.ndarray) -> np.ndarray:
    """4x4 exponential of the se(3) wedge matrix via the series oracle."""
    m = np.zeros((4, 4))
    m[:3, :3] = skew(xi[3:])
    m[:3, 3] = xi[:3]
    return matrix_exp_series(m, terms=30)


class TestSo3Exp:
    def test_zero_is_identity(self):
        assert np.allclose(so3_exp([0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        assert np.allclose(so3_exp([0, 0, math.pi / 2]), expected, atol=1e-12)

    def test_half_turn_about_x(self):
        assert np.allclose(so3_exp([math.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    def test_matches_series_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            phi = rng.normal(size=3)
            assert np.allclose(so3_exp(phi), matrix_exp_series(skew(phi)), atol=1e-12)

    def test_tiny_angle_branch(self):
        phi = np.array([1e-10, -2e-10, 5e-11])
        r = so3_exp(phi)
        assert np.allclose(r, matrix_exp_series(skew(phi)), atol=1e-18)


class TestSo3Log:
    def test_identity(self):
        assert np.allclose(so3_log(np.eye(3)), np.zeros(3))

    def test_roundtrip_simple(self):
        phi = np.array([0.1, 0.2, 0.3])
        assert np.allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)

    def test_pi_about_z_sign_convention(self):
        r = so3_exp([0, 0, math.pi])
        log = so3_log(r)
        assert np.allclose(log, [0, 0, math.pi], atol=1e-7)

    def test_pi_branch_eigen_axis_oracle(self):
        # at theta = pi the axis is the +1 eigenvector of R
        rng = np.random.default_rng(3)
        for _ in range(20):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            r = so3_exp(math.pi * axis)
            log = so3_log(r)
            assert abs(np.linalg.norm(log) - math.pi) < 1e-7
            unit = log / np.linalg.norm(log)
            # eigen axis up to sign
            assert np.allclose(r @ unit, unit, atol=1e-7)

    def test_roundtrip_random_angles(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            theta = rng.uniform(1e-8, math.pi - 1e-7)
            phi = theta * axis
            assert np.allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)

    def test_near_pi_roundtrip(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            theta = math.pi - 10 ** rng.uniform(-12, -5)
            phi = theta * axis
            r = so3_exp(phi)
            back = so3_exp(so3_log(r))
            assert np.allclose(back, r, atol=1e-9)


class TestRot3:
    def test_from_matrix_validates(self):
        with pytest.raises(ValueError):
            Rot3.from_matrix(np.eye(3) * 2.0)
        with pytest.raises(ValueError):
            Rot3.from_matrix(np.diag([1.0, 1.0, -1.0]))

    def test_immutable(self):
        r = Rot3.identity()
        with pytest.raises(ValueError):
            r.m[0, 0] = 2.0

    def test_apply_batch(self):
        r = Rot3.exp([0, 0, math.pi / 2])
        pts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        out = r.apply(pts)
        assert np.allclose(out, [[0, 1, 0], [-1, 0, 0]], atol=1e-12)


class TestPose3:
    def test_identity_compose(self):
        rng = np.random.default_rng(0)
        a = Pose3(random_rotation(rng), rng.normal(size=3))
        assert np.allclose(se3_compose(Pose3.identity(), a).matrix(), a.matrix())

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        a = Pose3(random_rotation(rng), rng.normal(size=3))
        ident = a.compose(a.inverse())
        assert np.allclose(ident.matrix(), np.eye(4), atol=1e-12)

    def test_translation_composition(self):
        a = Pose3(trans=[1, 0, 0])
        b = Pose3(trans=[0, 2, 0])
        assert np.allclose((a @ b).trans, [1, 2, 0])

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(2)
        a = Pose3(random_rotation(rng), rng.normal(size=3))
        b = Pose3(random_rotation(rng), rng.normal(size=3))
        assert np.allclose((a @ b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


class TestBoxplus:
    def test_zero_increment(self):
        rng = np.random.default_rng(4)
        t = Pose3(random_rotation(rng), rng.normal(size=3))
        out = se3_boxplus(t, np.zeros(6))
        assert np.allclose(out.matrix(), t.matrix())

    def test_pure_translation(self):
        out = se3_boxplus(Pose3.identity(), Tangent6([1, 0, 0], [0, 0, 0]))
        assert np.allclose(out.trans, [1, 0, 0])
        assert np.allclose(out.rot.m, np.eye(3))

    def test_matches_matrix_exponential_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            t = Pose3(random_rotation(rng), rng.normal(size=3))
            xi = rng.normal(size=6) * 0.8
            expected = t.matrix() @ se3_exp_oracle(xi)
            assert np.allclose(se3_boxplus(t, xi).matrix(), expected, atol=1e-9)

    def test_first_order_translation(self):
        # || boxplus(T, xi).trans - (T.trans + R xi.rho) || = O(||xi||^2)
        rng = np.random.default_rng(6)
        t = Pose3(random_rotation(rng), rng.normal(size=3))
        for scale in (1e-2, 1e-4):
            xi = rng.normal(size=6) * scale
            got = se3_boxplus(t, xi).trans
            first = t.trans + t.rot.apply(xi[:3])
            assert np.linalg.norm(got - first) < 10.0 * scale**2

    def test_log_roundtrip(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            xi = rng.normal(size=6)
            phi_norm = np.linalg.norm(xi[3:])
            if phi_norm > 0:
                xi[3:] *= rng.uniform(0, math.pi - 1e-6) / phi_norm
            t = se3_exp(xi)
            assert np.allclose(se3_log(t), xi, atol=1e-9)


class TestJacobians:
    def numeric_point_jacobian(self, t: Pose3, l: np.ndarray, h: float = 1e-6) -> np.ndarray:
        out = np.zeros((3, 6))
        for j in range(6):
            d = np.zeros(6)
            d[j] = h
            fp = se3_boxplus(t, d).apply(l)
            fm = se3_boxplus(t, -d).apply(l)
            out[:, j] = (fp - fm) / (2 * h)
        return out

    def test_identity_origin(self):
        j = jac_point_action(Pose3.identity(), [0, 0, 0])
        assert np.allclose(j[:, :3], np.eye(3))
        assert np.allclose(j[:, 3:], np.zeros((3, 3)))

    def test_identity_unit_x(self):
        j = jac_point_action(Pose3.identity(), [1, 0, 0])
        num = self.numeric_point_jacobian(Pose3.identity(), np.array([1.0, 0, 0]))
        assert np.allclose(j[:, :3], np.eye(3))
        assert np.allclose(j[:, 3:], -skew([1, 0, 0]))
        assert np.allclose(j, num, atol=1e-5)

    def test_random_samples_match_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            t = Pose3(random_rotation(rng), rng.normal(size=3))
            l = rng.normal(size=3) * 5.0
            j = jac_point_action(t, l)
            num = self.numeric_point_jacobian(t, l)
            denom = max(1.0, np.max(np.abs(num)))
            assert np.max(np.abs(j - num)) / denom < 1e-5

    def test_se3_left_jacobian_first_order(self):
        # exp(xi + d) ~ exp(xi) boxplus (Jr d), and Jl(xi) = Adj(exp(xi)) Jr(xi)
        rng = np.random.default_rng(10)
        for _ in range(20):
            xi = rng.normal(size=6)
            xi[3:] *= 0.5
            jl = se3_left_jacobian(xi)
            h = 1e-7
            num = np.zeros((6, 6))
            for j in range(6):
                d = np.zeros(6)
                d[j] = h
                num[:, j] = (se3_log(se3_exp(xi + d) @ se3_exp(xi).inverse())) / h
            assert np.allclose(jl, num, atol=1e-5)

    def test_right_jacobian_inverse(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            xi = rng.normal(size=6)
            xi[3:] *= 0.5
            jr_inv = se3_right_jacobian_inv(xi)
            # d/d(delta) log(exp(xi) exp(delta)) = Jr^-1(xi)
            h = 1e-7
            num = np.zeros((6, 6))
            for j in range(6):
                d = np.zeros(6)
                d[j] = h
                num[:, j] = (se3_log(se3_exp(xi) @ se3_exp(d)) - xi) / h
            assert np.allclose(jr_inv, num, atol=1e-5)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(14)
        t = Pose3(random_rotation(rng), rng.normal(size=3))
        xi = rng.normal(size=6) * 0.1
        left = t @ se3_exp(xi)
        right = se3_exp(se3_adjoint(t) @ xi) @ t
        assert np.allclose(left.matrix(), right.matrix(), atol=1e-9)


class TestQuaternions:
    def test_roundtrip(self):
        rng = np.random.default_rng(15)
        for _ in range(100):
            r = random_rotation(rng).m
            q = quaternion_from_rotation(r)
            assert np.allclose(rotation_from_quaternion(q), r, atol=1e-12)
            assert q[3] >= 0.0


class TestTwist:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Twist(v=[np.nan, 0, 0])

    def test_zero(self):
        assert Twist.zero().is_zero()
