"""Rigid-body transforms on SE(3) and the left-perturbation Jacobian.

Twist convention
----------------
A :class:`Twist` is ``[rho, phi]`` where ``rho`` is the **rotation** part
(radians, axis-angle) and ``phi`` the **translation** part (meters)::

    hat([rho, phi]) = [[skew(rho), phi],
                       [0 0 0,      0 ]]

This places the rotation first, which is the reverse of the common
``[translation, rotation]`` ordering used by many Lie-group libraries.

The 3x6 point Jacobian returned by :func:`point_jacobian` keeps the classic
``[I | -skew(T p)]`` column layout, i.e. columns 0-2 are the derivative with
respect to a translational perturbation and columns 3-5 with respect to a
rotational one. Use :func:`twist_from_jacobian_step` to turn a solver step
expressed in that layout into a :class:`Twist`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import AngleNearPi

SMALL_ANGLE = 1e-5
ORTHO_TOL = 1e-10
NEAR_PI_MARGIN = 1e-6


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    return a


@dataclass(frozen=True, eq=False)
class Twist:
    """Element of se(3). ``rho`` rotates (rad), ``phi`` translates (m)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", _vec3(self.rho))
        object.__setattr__(self, "phi", _vec3(self.phi))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        """Stack as ``[rho, phi]``."""
        return np.concatenate([self.rho, self.phi])

    def __repr__(self):
        return f"Twist(rho={self.rho.tolist()}, phi={self.phi.tolist()})"


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t`` (sensor to map)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def angle(self) -> float:
        """Rotation angle in radians, in ``[0, pi]``."""
        return rotation_angle(self.rotation)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return compose(self, other)
        return transform_points(self, other)

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = _vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def hat(xi: Twist) -> np.ndarray:
    """4x4 matrix form of a twist: rotation block ``skew(rho)``, column ``phi``."""
    out = np.zeros((4, 4))
    out[:3, :3] = skew(xi.rho)
    out[:3, 3] = xi.phi
    return out


def _series(theta):
    # Returns sin(t)/t, (1 - cos t)/t^2, (t - sin t)/t^3.
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = np.sin(theta)
    one_minus_cos = 2.0 * np.sin(0.5 * theta) ** 2
    return s / theta, one_minus_cos / theta**2, (theta - s) / theta**3


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula."""
    omega = _vec3(omega)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _series(theta)
    K = skew(omega)
    return np.eye(3) + a * K + b * (K @ K)


def left_jacobian_so3(omega) -> np.ndarray:
    omega = _vec3(omega)
    theta = float(np.linalg.norm(omega))
    _, b, c = _series(theta)
    K = skew(omega)
    return np.eye(3) + b * K + c * (K @ K)


def exp(xi: Twist) -> Pose:
    """Exponential map se(3) -> SE(3)."""
    R = so3_exp(xi.rho)
    t = left_jacobian_so3(xi.rho) @ xi.phi
    return Pose(R, t)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta > np.pi - NEAR_PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} rad is too close to pi")
    if theta < SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / s)


def log(T: Pose) -> Twist:
    """Logarithm SE(3) -> se(3), principal branch.

    Raises :class:`AngleNearPi` when the rotation angle is within 1e-6 rad of pi.
    """
    omega = so3_log(T.rotation)
    phi = np.linalg.solve(left_jacobian_so3(omega), T.translation)
    return Twist(omega, phi)


def rotation_angle(R) -> float:
    R = np.asarray(R, dtype=float)
    s = np.linalg.norm(0.5 * vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def compose(A: Pose, B: Pose) -> Pose:
    R = A.rotation @ B.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
        R = orthonormalize(R)
    return Pose(R, A.rotation @ B.translation + A.translation)


def inverse(T: Pose) -> Pose:
    Rt = T.rotation.T
    return Pose(Rt, -Rt @ T.translation)


def transform_point(T: Pose, p) -> np.ndarray:
    return T.rotation @ _vec3(p) + T.translation


def transform_points(T: Pose, points) -> np.ndarray:
    """Apply ``T`` to an (n, 3) array of points."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    return P @ T.rotation.T + T.translation


def point_jacobian(T: Pose, p) -> np.ndarray:
    """Derivative of ``exp(d) T p`` at ``d = 0``: ``[I | -skew(T p)]``.

    Columns 0-2 belong to the translational perturbation, 3-5 to the
    rotational one (see module docstring).
    """
    q = transform_point(T, p)
    return np.hstack([np.eye(3), -skew(q)])


def point_jacobians(points_world) -> np.ndarray:
    """Batched :func:`point_jacobian` for already-transformed points, (n, 3, 6)."""
    Q = np.asarray(points_world, dtype=float).reshape(-1, 3)
    n = Q.shape[0]
    J = np.zeros((n, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    x, y, z = Q[:, 0], Q[:, 1], Q[:, 2]
    # -skew(q)
    J[:, 0, 4], J[:, 0, 5] = z, -y
    J[:, 1, 3], J[:, 1, 5] = -z, x
    J[:, 2, 3], J[:, 2, 4] = y, -x
    return J


def twist_from_jacobian_step(delta) -> Twist:
    """Map a ``[translation, rotation]`` solver step onto ``Twist(rho, phi)``."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    return Twist(rho=delta[3:], phi=delta[:3])


def rotation_about(axis, angle) -> Pose:
    axis = _vec3(axis)
    axis = axis / np.linalg.norm(axis)
    return Pose(so3_exp(axis * angle), np.zeros(3))


def interpolate(A: Pose, B: Pose, s: float) -> Pose:
    """Linear translation, spherical-linear rotation; ``s`` in [0, 1]."""
    dR = A.rotation.T @ B.rotation
    R = A.rotation @ so3_exp(s * so3_log(dR))
    t = (1.0 - s) * A.translation + s * B.translation
    return Pose(R, t)


def pose_distance(A: Pose, B: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (rad) difference between two poses."""
    dt = float(np.linalg.norm(A.translation - B.translation))
    dr = rotation_angle(A.rotation.T @ B.rotation)
    return dt, dr
