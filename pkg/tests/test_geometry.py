import numpy as np
import pytest

from plio.geometry import (
    QUAT_IDENTITY,
    Pose,
    pose_interpolate,
    quat_boxminus,
    quat_boxplus,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_to_rot,
    rot_interpolate,
    rot_to_quat,
    so3_exp,
    so3_exp_many,
    so3_left_jacobian,
    so3_log,
)


def random_quat(rng):
    return quat_normalize(rng.standard_normal(4))


def test_identity_product():
    rng = np.random.default_rng(0)
    q = random_quat(rng)
    np.testing.assert_allclose(quat_multiply(QUAT_IDENTITY, q), q, atol=1e-14)
    np.testing.assert_allclose(quat_multiply(q, QUAT_IDENTITY), q, atol=1e-14)


def test_conjugate_is_inverse():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = random_quat(rng)
        np.testing.assert_allclose(
            quat_multiply(q, quat_conjugate(q)), QUAT_IDENTITY, atol=1e-12
        )


def test_product_matches_rotation_matrices():
    # oracle: a quaternion product must compose exactly like its matrices
    rng = np.random.default_rng(2)
    for _ in range(50):
        q1, q2 = random_quat(rng), random_quat(rng)
        R = quat_to_rot(quat_multiply(q1, q2))
        np.testing.assert_allclose(R, quat_to_rot(q1) @ quat_to_rot(q2), atol=1e-12)


def test_unit_norm_after_operations():
    rng = np.random.default_rng(3)
    for _ in range(100):
        q = quat_multiply(random_quat(rng), random_quat(rng))
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12
        q = quat_boxplus(random_quat(rng), rng.standard_normal(3))
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12


def test_rot_quat_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = random_quat(rng)
        R = quat_to_rot(q)
        np.testing.assert_allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-10)
        assert abs(np.linalg.det(R) - 1.0) < 1e-10
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-10)


def test_boxplus_zero_is_identity():
    rng = np.random.default_rng(5)
    q = random_quat(rng)
    np.testing.assert_allclose(quat_boxplus(q, np.zeros(3)), q, atol=1e-14)


def test_boxplus_small_angle_about_x():
    eps = 1e-4
    q = quat_boxplus(QUAT_IDENTITY, np.array([eps, 0.0, 0.0]))
    expected = np.array([np.sin(eps / 2), 0.0, 0.0, np.cos(eps / 2)])
    np.testing.assert_allclose(q, expected, atol=eps**2)


def test_boxplus_matches_exp_map():
    # oracle: R(q [+] d) == so3_exp(-d) @ R(q)
    rng = np.random.default_rng(6)
    for _ in range(50):
        q = random_quat(rng)
        d = 1e-3 * quat_normalize(rng.standard_normal(4))[:3]
        left = quat_to_rot(quat_boxplus(q, d))
        right = so3_exp(-d) @ quat_to_rot(q)
        np.testing.assert_allclose(left, right, atol=1e-12)


def test_boxminus_inverts_boxplus():
    rng = np.random.default_rng(7)
    for _ in range(50):
        q = random_quat(rng)
        d = 0.5 * rng.standard_normal(3)
        np.testing.assert_allclose(quat_boxminus(quat_boxplus(q, d), q), d, atol=1e-10)


def test_boxplus_second_order_associativity():
    rng = np.random.default_rng(8)
    for _ in range(20):
        q = random_quat(rng)
        a = 1e-3 * rng.standard_normal(3)
        b = 1e-3 * rng.standard_normal(3)
        lhs = quat_boxplus(q, a + b)
        rhs = quat_boxplus(quat_boxplus(q, b), a)
        assert np.linalg.norm(quat_boxminus(lhs, rhs)) < 5e-6


def test_exp_zero():
    np.testing.assert_allclose(so3_exp(np.zeros(3)), np.eye(3), atol=1e-15)


def test_exp_quarter_turn_x():
    R = so3_exp(np.array([np.pi / 2, 0.0, 0.0]))
    expected = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    np.testing.assert_allclose(R, expected, atol=1e-12)


def test_log_exp_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        v = rng.standard_normal(3)
        v = v / np.linalg.norm(v) * rng.uniform(0.0, 3.0)
        np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-9)


def test_log_near_pi_branch():
    for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0.2, -0.5, 0.3])):
        axis = axis / np.linalg.norm(axis)
        v = (np.pi - 1e-9) * axis
        R = so3_exp(v)
        w = so3_log(R)
        np.testing.assert_allclose(so3_exp(w), R, atol=1e-7)


def test_exp_many_matches_scalar():
    rng = np.random.default_rng(10)
    phis = rng.standard_normal((40, 3))
    phis[0] = 0.0
    batch = so3_exp_many(phis)
    for i, phi in enumerate(phis):
        np.testing.assert_allclose(batch[i], so3_exp(phi), atol=1e-12)


def test_left_jacobian_is_exp_integral():
    rng = np.random.default_rng(11)
    for _ in range(10):
        phi = rng.standard_normal(3)
        ts = np.linspace(0.0, 1.0, 20001)
        Rs = so3_exp_many(np.outer(ts, phi))
        # trapezoid quadrature of the matrix integral
        acc = (Rs[0] + Rs[-1]) / 2 + Rs[1:-1].sum(axis=0)
        acc /= len(ts) - 1
        np.testing.assert_allclose(so3_left_jacobian(phi), acc, atol=1e-8)


class TestPoseInterpolate:
    def make_pose(self, rng, stamp):
        return Pose(q=random_quat(rng), p=rng.standard_normal(3), stamp=stamp)

    def test_endpoint(self):
        rng = np.random.default_rng(12)
        p0 = self.make_pose(rng, 1.0)
        p1 = self.make_pose(rng, 2.0)
        out = pose_interpolate(p0, p1, 1.0)
        np.testing.assert_allclose(quat_to_rot(out.q), quat_to_rot(p0.q), atol=1e-12)
        np.testing.assert_allclose(out.p, p0.p, atol=1e-14)

    def test_midpoint_geodesic_symmetry(self):
        rot_z = lambda a: so3_exp(np.array([0.0, 0.0, a]))
        p0 = Pose(q=QUAT_IDENTITY, p=np.zeros(3), stamp=0.0)
        p1 = Pose(q=rot_to_quat(rot_z(0.2)), p=np.ones(3), stamp=1.0)
        out = pose_interpolate(p0, p1, 0.5)
        np.testing.assert_allclose(quat_to_rot(out.q), rot_z(0.1), atol=1e-12)
        np.testing.assert_allclose(out.p, 0.5 * np.ones(3), atol=1e-14)

    def test_definition_oracle(self):
        # log(R0^T R(t)) must equal lam * log(R0^T R1)
        rng = np.random.default_rng(13)
        for _ in range(20):
            p0 = self.make_pose(rng, 0.0)
            p1 = self.make_pose(rng, 1.0)
            out = pose_interpolate(p0, p1, 0.37)
            R0, R1, Rt = (quat_to_rot(p.q) for p in (p0, p1, out))
            np.testing.assert_allclose(
                so3_log(R0.T @ Rt), 0.37 * so3_log(R0.T @ R1), atol=1e-9
            )

    def test_left_equivariance(self):
        rng = np.random.default_rng(14)
        G = so3_exp(rng.standard_normal(3))
        p0 = self.make_pose(rng, 0.0)
        p1 = self.make_pose(rng, 1.0)
        out = pose_interpolate(p0, p1, 0.7)
        g0 = Pose(q=rot_to_quat(quat_to_rot(p0.q) @ G), p=p0.p, stamp=0.0)
        g1 = Pose(q=rot_to_quat(quat_to_rot(p1.q) @ G), p=p1.p, stamp=1.0)
        gout = pose_interpolate(g0, g1, 0.7)
        np.testing.assert_allclose(quat_to_rot(gout.q), quat_to_rot(out.q) @ G, atol=1e-10)

    def test_out_of_range_raises(self):
        rng = np.random.default_rng(15)
        p0 = self.make_pose(rng, 0.0)
        p1 = self.make_pose(rng, 1.0)
        with pytest.raises(ValueError):
            pose_interpolate(p0, p1, 1.5)
        with pytest.raises(ValueError):
            pose_interpolate(p0, p1, -0.1)


def test_rot_interpolate_endpoints():
    rng = np.random.default_rng(16)
    R0 = so3_exp(rng.standard_normal(3))
    R1 = so3_exp(rng.standard_normal(3))
    np.testing.assert_allclose(rot_interpolate(R0, R1, 0.0), R0, atol=1e-12)
    np.testing.assert_allclose(rot_interpolate(R0, R1, 1.0), R1, atol=1e-9)
