"""SO(3)/SE(3) operations: exponential/logarithm maps, Jacobians, poses.

Conventions used throughout the package:

- Rotations are 3x3 orthonormal numpy matrices.
- se(3) tangent vectors are 6-vectors ordered ``(phi, rho)``: rotation part
  first (radians), translation part second (meters).
- All on-manifold updates use the right perturbation ``P * Exp(delta)``.
- ``Pose`` maps points from its "source" frame into its "target" frame:
  ``p_target = R @ p_source + t``.

Small angles (below ``SMALL_ANGLE``) switch the trigonometric coefficients
to 4th-order Taylor series to avoid catastrophic cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-6


class AngleNearPiError(ValueError):
    """Rotation angle too close to pi for a well-conditioned logarithm."""


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that skew(a) @ b = cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _rodrigues_coeffs(theta: float) -> tuple[float, float]:
    """Coefficients a, b with R = I + a*Phi + b*Phi^2 (Phi unnormalized)."""
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / t2
    return a, b


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula: Exp(phi) for a rotation vector phi (radians)."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    a, b = _rodrigues_coeffs(theta)
    p = skew(phi)
    return np.eye(3) + a * p + b * (p @ p)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of rot. Raises AngleNearPiError within 1e-6 of pi."""
    w = unskew(rot - rot.T)  # = 2 sin(theta) * axis
    s = 0.5 * np.linalg.norm(w)
    c = 0.5 * (np.trace(rot) - 1.0)
    theta = np.arctan2(s, c)
    if theta > np.pi - 1e-6:
        raise AngleNearPiError(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        # w = 2 sin(theta) n; theta/(2 sin(theta)) ~ 0.5 + theta^2/12
        return (0.5 + theta * theta / 12.0) * w
    return (theta / (2.0 * s)) * w


def _jacobian_coeffs(theta: float) -> tuple[float, float]:
    """Coefficients b, c with J_l = I + b*Phi + c*Phi^2."""
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        b = (1.0 - np.cos(theta)) / t2
        c = (theta - np.sin(theta)) / (t2 * theta)
    return b, c


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """J_l with Exp(phi + d) ~ Exp(J_l d) Exp(phi) to first order."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    b, c = _jacobian_coeffs(theta)
    p = skew(phi)
    return np.eye(3) + b * p + c * (p @ p)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """J_r with Exp(phi + d) ~ Exp(phi) Exp(J_r d) to first order."""
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def _inv_jacobian_coeff(theta: float) -> float:
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    return 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    p = skew(phi)
    return np.eye(3) - 0.5 * p + _inv_jacobian_coeff(theta) * (p @ p)


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """One Newton step toward the closest orthonormal matrix.

    Adequate for drift of composition chains (error is squared); not a
    substitute for a full polar decomposition of arbitrary matrices.
    """
    return rot @ (1.5 * np.eye(3) - 0.5 * (rot.T @ rot))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_target = rotation @ p_source + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        rot = orthonormalize(self.rotation @ other.rotation)
        return Pose(rot, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt.copy(), -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 Adj with Exp(Adj(P) xi) = P Exp(xi) P^-1, (phi, rho) order."""
        adj = np.zeros((6, 6))
        adj[:3, :3] = self.rotation
        adj[3:, 3:] = self.rotation
        adj[3:, :3] = skew(self.translation) @ self.rotation
        return adj

    def retract(self, delta: np.ndarray) -> "Pose":
        """Right-multiplicative update P * Exp(delta)."""
        return self.compose(se3_exp(delta))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def se3_exp(xi: np.ndarray) -> Pose:
    """SE(3) exponential of a twist (phi, rho)."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of se3_exp; raises AngleNearPiError near antipodal rotations."""
    phi = so3_log(pose.rotation)
    rho = so3_left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([phi, rho])


def _se3_q_matrix(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Q block of the SE(3) left Jacobian (Barfoot's closed form)."""
    theta = float(np.linalg.norm(phi))
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        t4 = t2 * t2
        c1 = (theta - np.sin(theta)) / (t2 * theta)
        c2 = (t2 + 2.0 * np.cos(theta) - 2.0) / (2.0 * t4)
        c3 = (2.0 * theta - 3.0 * np.sin(theta) + theta * np.cos(theta)) / (2.0 * t4 * theta)
    f = skew(phi)
    r = skew(rho)
    fr = f @ r
    rf = r @ f
    frf = fr @ f
    return (
        0.5 * r
        + c1 * (fr + rf + frf)
        + c2 * (f @ fr + rf @ f - 3.0 * frf)
        + c3 * (frf @ f + f @ frf)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """6x6 J_l with se3_exp(xi + d) ~ se3_exp(J_l d) * se3_exp(xi)."""
    xi = np.asarray(xi, dtype=float)
    jl = so3_left_jacobian(xi[:3])
    out = np.zeros((6, 6))
    out[:3, :3] = jl
    out[3:, 3:] = jl
    out[3:, :3] = _se3_q_matrix(xi[:3], xi[3:])
    return out


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse of the SE(3) right Jacobian, in closed form."""
    xi = np.asarray(xi, dtype=float)
    ji = so3_right_jacobian_inv(xi[:3])
    q = _se3_q_matrix(-xi[:3], -xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = ji
    out[3:, 3:] = ji
    out[3:, :3] = -ji @ q @ ji
    return out


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(rot: np.ndarray) -> float:
    """Heading angle of the rotated x-axis, projected to the xy-plane."""
    return float(np.arctan2(rot[1, 0], rot[0, 0]))


def quat_from_rotation(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) of a rotation matrix (Shepperd's method)."""
    t = np.trace(rot)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (rot[2, 1] - rot[1, 2]) / s
        y = (rot[0, 2] - rot[2, 0]) / s
        z = (rot[1, 0] - rot[0, 1]) / s
    elif rot[0, 0] >= rot[1, 1] and rot[0, 0] >= rot[2, 2]:
        s = np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
        w = (rot[2, 1] - rot[1, 2]) / s
        x = 0.25 * s
        y = (rot[0, 1] + rot[1, 0]) / s
        z = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] >= rot[2, 2]:
        s = np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
        w = (rot[0, 2] - rot[2, 0]) / s
        x = (rot[0, 1] + rot[1, 0]) / s
        y = 0.25 * s
        z = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
        w = (rot[1, 0] - rot[0, 1]) / s
        x = (rot[0, 2] + rot[2, 0]) / s
        y = (rot[1, 2] + rot[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


def rotation_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (x, y, z, w); normalizes the input."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
