import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from solidslam import se3
from solidslam.exceptions import AngleNearPi
from solidslam.se3 import Pose, Twist


def random_twist(rng, max_rot=3.0, max_trans=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rho = axis * rng.uniform(0, max_rot)
    return Twist(rho, rng.uniform(-max_trans, max_trans, size=3))


def random_pose(rng):
    return se3.exp(random_twist(rng))


def fd_point_jacobian(T, p, h=1e-6):
    """Central differences of exp(d) T p, columns ordered [translation, rotation]."""
    J = np.zeros((3, 6))
    for j in range(6):
        d = np.zeros(6)
        d[j] = h
        plus = se3.twist_from_jacobian_step(d)
        minus = se3.twist_from_jacobian_step(-d)
        fp = se3.transform_point(se3.compose(se3.exp(plus), T), p)
        fm = se3.transform_point(se3.compose(se3.exp(minus), T), p)
        J[:, j] = (fp - fm) / (2 * h)
    return J


class TestSkewHat:
    def test_skew_zero(self):
        np.testing.assert_array_equal(se3.skew([0, 0, 0]), np.zeros((3, 3)))

    def test_skew_z_axis(self):
        np.testing.assert_array_equal(
            se3.skew([0, 0, 1]), [[0, -1, 0], [1, 0, 0], [0, 0, 0]]
        )

    def test_skew_matches_cross(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            v, w = rng.normal(size=(2, 3))
            S = se3.skew(v)
            np.testing.assert_allclose(S @ w, np.cross(v, w), atol=1e-12)
            np.testing.assert_array_equal(S, -S.T)

    def test_hat_zero(self):
        np.testing.assert_array_equal(se3.hat(Twist.zero()), np.zeros((4, 4)))

    def test_hat_layout(self):
        H = se3.hat(Twist(rho=[0, 0, 1], phi=[1, 2, 3]))
        np.testing.assert_array_equal(
            H, [[0, -1, 0, 1], [1, 0, 0, 2], [0, 0, 0, 3], [0, 0, 0, 0]]
        )

    def test_hat_linear(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x1, x2 = random_twist(rng), random_twist(rng)
            a, b = rng.normal(size=2)
            combo = Twist.from_vector(a * x1.as_vector() + b * x2.as_vector())
            np.testing.assert_allclose(
                se3.hat(combo), a * se3.hat(x1) + b * se3.hat(x2), atol=1e-12
            )


class TestExpLog:
    def test_exp_zero_is_identity(self):
        T = se3.exp(Twist.zero())
        np.testing.assert_array_equal(T.matrix(), np.eye(4))

    def test_exp_pure_translation(self):
        T = se3.exp(Twist([0, 0, 0], [1, 2, 3]))
        np.testing.assert_array_equal(T.rotation, np.eye(3))
        np.testing.assert_array_equal(T.translation, [1, 2, 3])

    def test_exp_quarter_turn_about_z(self):
        T = se3.exp(Twist([0, 0, np.pi / 2], [0, 0, 0]))
        # Rodrigues with unit axis z and angle pi/2: I + K + 0 * K^2 ... = [[0,-1,0],[1,0,0],[0,0,1]]
        np.testing.assert_allclose(
            T.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15
        )
        np.testing.assert_allclose(T.translation, 0, atol=1e-15)

    def test_exp_matches_matrix_exponential(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            xi = random_twist(rng)
            np.testing.assert_allclose(
                se3.exp(xi).matrix(), expm(se3.hat(xi)), atol=1e-10
            )

    def test_exp_small_angle_branch_continuous(self):
        for theta in [0.0, 1e-12, 1e-9, 1e-7, 9.9e-6, 1.01e-5, 1e-3]:
            xi = Twist([theta, 0, 0], [0.3, -0.2, 0.1])
            np.testing.assert_allclose(
                se3.exp(xi).matrix(), expm(se3.hat(xi)), atol=1e-14
            )

    def test_log_identity(self):
        xi = se3.log(Pose.identity())
        np.testing.assert_array_equal(xi.as_vector(), np.zeros(6))

    def test_log_pure_translation(self):
        xi = se3.log(Pose.from_translation([1, 2, 3]))
        np.testing.assert_allclose(xi.rho, 0, atol=0)
        np.testing.assert_allclose(xi.phi, [1, 2, 3], atol=1e-15)

    def test_log_exp_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            xi = random_twist(rng)
            back = se3.log(se3.exp(xi))
            np.testing.assert_allclose(back.as_vector(), xi.as_vector(), atol=1e-9)

    def test_exp_log_exp_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            T = se3.exp(random_twist(rng))
            T2 = se3.exp(se3.log(T))
            assert np.abs(T2.matrix() - T.matrix()).max() < 1e-9
            R = T2.rotation
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9

    def test_log_near_pi_raises(self):
        T = se3.exp(Twist([0, 0, np.pi - 1e-8], [0, 0, 0]))
        with pytest.raises(AngleNearPi):
            se3.log(T)


class TestCompose:
    def test_transform_identity(self):
        np.testing.assert_array_equal(
            se3.transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3]
        )

    def test_transform_translation(self):
        np.testing.assert_array_equal(
            se3.transform_point(Pose.from_translation([1, 0, 0]), [0, 0, 0]), [1, 0, 0]
        )

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            T = random_pose(rng)
            p = rng.normal(size=3)
            q = se3.transform_point(se3.compose(se3.inverse(T), T), p)
            np.testing.assert_allclose(q, p, atol=1e-9)
            I = se3.compose(T, se3.inverse(T)).matrix()
            np.testing.assert_allclose(I, np.eye(4), atol=1e-9)

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(6)
        A, B = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(
            se3.compose(A, B).matrix(), A.matrix() @ B.matrix(), atol=1e-12
        )

    def test_compose_associative(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            A, B, C = (random_pose(rng) for _ in range(3))
            left = se3.compose(se3.compose(A, B), C).matrix()
            right = se3.compose(A, se3.compose(B, C)).matrix()
            assert np.abs(left - right).max() < 1e-9

    def test_long_composition_stays_orthonormal(self):
        rng = np.random.default_rng(8)
        T = Pose.identity()
        for _ in range(5000):
            T = se3.compose(T, se3.exp(random_twist(rng, 0.1, 0.1)))
        R = T.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9

    def test_batch_transform_matches_single(self):
        rng = np.random.default_rng(9)
        T = random_pose(rng)
        P = rng.normal(size=(20, 3))
        Q = se3.transform_points(T, P)
        for p, q in zip(P, Q):
            np.testing.assert_allclose(se3.transform_point(T, p), q, atol=1e-12)


class TestPointJacobian:
    def test_identity_origin(self):
        J = se3.point_jacobian(Pose.identity(), [0, 0, 0])
        np.testing.assert_array_equal(J, np.hstack([np.eye(3), np.zeros((3, 3))]))

    def test_identity_point(self):
        J = se3.point_jacobian(Pose.identity(), [1, 2, 3])
        np.testing.assert_array_equal(J, np.hstack([np.eye(3), -se3.skew([1, 2, 3])]))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(1000):
            T = random_pose(rng)
            p = rng.uniform(-5, 5, size=3)
            J = se3.point_jacobian(T, p)
            Jfd = fd_point_jacobian(T, p)
            assert np.linalg.norm(J - Jfd) <= 1e-5 * max(np.linalg.norm(J), 1.0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(11)
        T = random_pose(rng)
        P = rng.normal(size=(10, 3))
        Jb = se3.point_jacobians(se3.transform_points(T, P))
        for p, J in zip(P, Jb):
            np.testing.assert_allclose(J, se3.point_jacobian(T, p), atol=1e-12)


angles = st.floats(min_value=-2.9, max_value=2.9, allow_nan=False)
coords = st.floats(min_value=-10, max_value=10, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.tuples(angles, angles, angles), st.tuples(coords, coords, coords))
def test_exp_log_property(rot, trans):
    rho = np.array(rot)
    n = np.linalg.norm(rho)
    if n > 2.9:
        rho = rho * (2.9 / n)
    T = se3.exp(Twist(rho, trans))
    back = se3.exp(se3.log(T))
    assert np.abs(back.matrix() - T.matrix()).max() < 1e-9


def test_interpolate_midpoint_of_quarter_turn():
    A = Pose.identity()
    B = se3.rotation_about([0, 0, 1], np.pi / 2)
    mid = se3.interpolate(A, B, 0.5)
    np.testing.assert_allclose(
        mid.rotation, se3.rotation_about([0, 0, 1], np.pi / 4).rotation, atol=1e-12
    )
