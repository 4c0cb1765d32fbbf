"""IMU preintegration between consecutive keyframes.

Accumulates gyro/accelerometer samples into relative rotation, velocity
and position pseudo-measurements, together with first-order bias
Jacobians and a propagated 9x9 covariance (error order: rotation,
position, velocity). Gravity is not folded into the deltas; it is applied
when predicting a state. Integration uses the midpoint rule: each interval
between consecutive samples is integrated with the average of its two
endpoint measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .liegroup import Pose, skew, so3_exp, so3_right_jacobian


class EmptyStreamError(ValueError):
    """No sample interval to integrate."""


class NonMonotonicTimestampsError(ValueError):
    """Sample timestamps must be strictly increasing."""


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray
    linear_acceleration: np.ndarray


@dataclass(frozen=True)
class ImuNoiseModel:
    """Continuous-time noise densities (per sqrt(Hz)) and bias random walks."""

    gyro_noise_density: float = 2.0e-4
    accel_noise_density: float = 2.0e-3
    gyro_bias_walk: float = 1.0e-5
    accel_bias_walk: float = 1.0e-4

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class NavState:
    """Per-keyframe state: body pose in the local frame, velocity, biases."""

    pose: Pose = field(default_factory=Pose.identity)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class PreintegratedImu:
    """Relative motion between two keyframes plus bias sensitivities.

    ``covariance`` is ordered (rotation, position, velocity). The bias
    Jacobians give the first-order change of each delta per unit change of
    gyro/accel bias away from ``linearization_bias``.
    """

    delta_R: np.ndarray
    delta_p: np.ndarray
    delta_v: np.ndarray
    dt_total: float
    J_g_dR: np.ndarray
    J_g_dv: np.ndarray
    J_a_dv: np.ndarray
    J_g_dp: np.ndarray
    J_a_dp: np.ndarray
    covariance: np.ndarray
    linearization_bias: tuple[np.ndarray, np.ndarray]

    def information(self) -> np.ndarray:
        """Inverse of the propagated covariance (regularized)."""
        cov = self.covariance + 1e-16 * np.eye(9)
        return np.linalg.inv(cov)


def integrate(
    samples: list[ImuSample],
    bias: tuple[np.ndarray, np.ndarray] = (np.zeros(3), np.zeros(3)),
    noise: ImuNoiseModel = ImuNoiseModel(),
) -> PreintegratedImu:
    """Fold an IMU stream into a PreintegratedImu at the given bias.

    ``bias`` is (gyro, accel) and becomes the linearization point; the
    stream needs at least two samples (one interval).
    """
    if len(samples) < 2:
        raise EmptyStreamError("need at least two samples (one interval)")
    b_g = np.asarray(bias[0], dtype=float)
    b_a = np.asarray(bias[1], dtype=float)

    d_rot = np.eye(3)
    d_p = np.zeros(3)
    d_v = np.zeros(3)
    dt_total = 0.0
    j_g_dr = np.zeros((3, 3))
    j_g_dv = np.zeros((3, 3))
    j_a_dv = np.zeros((3, 3))
    j_g_dp = np.zeros((3, 3))
    j_a_dp = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    eye3 = np.eye(3)

    var_g = noise.gyro_noise_density**2
    var_a = noise.accel_noise_density**2

    for prev, curr in zip(samples[:-1], samples[1:]):
        dt = curr.timestamp - prev.timestamp
        if dt <= 0.0:
            raise NonMonotonicTimestampsError(
                f"timestamps not strictly increasing at t={curr.timestamp}"
            )
        w_mid = 0.5 * (prev.angular_velocity + curr.angular_velocity) - b_g
        a_mid = 0.5 * (prev.linear_acceleration + curr.linear_acceleration) - b_a

        dtheta = w_mid * dt
        incr = so3_exp(dtheta)
        j_r = so3_right_jacobian(dtheta)
        # specific force is rotated with the mid-interval attitude, which
        # keeps the global scheme second order on curved trajectories
        half = so3_exp(0.5 * dtheta)
        rot_eff = d_rot @ half
        a_half = half @ a_mid
        coupling = d_rot @ skew(a_half)  # d(rot_eff a_mid)/d(attitude error)

        # error-state transition and noise mapping, order (phi, p, v)
        a_mat = np.eye(9)
        a_mat[0:3, 0:3] = incr.T
        a_mat[3:6, 0:3] = -0.5 * coupling * dt * dt
        a_mat[3:6, 6:9] = eye3 * dt
        a_mat[6:9, 0:3] = -coupling * dt
        b_mat = np.zeros((9, 6))
        b_mat[0:3, 0:3] = j_r * dt
        b_mat[3:6, 3:6] = 0.5 * rot_eff * dt * dt
        b_mat[6:9, 3:6] = rot_eff * dt
        q_diag = np.concatenate([np.full(3, var_g / dt), np.full(3, var_a / dt)])
        cov = a_mat @ cov @ a_mat.T + (b_mat * q_diag) @ b_mat.T

        # d(rot_eff a_mid)/d(gyro bias): through the accumulated rotation
        # and through the half-interval attitude itself
        dacc_dbg = -coupling @ j_g_dr + 0.5 * dt * rot_eff @ skew(a_mid) @ so3_right_jacobian(0.5 * dtheta)

        # bias Jacobians (position before velocity: uses current-step values)
        j_g_dp = j_g_dp + j_g_dv * dt + 0.5 * dacc_dbg * dt * dt
        j_a_dp = j_a_dp + j_a_dv * dt - 0.5 * rot_eff * dt * dt
        j_g_dv = j_g_dv + dacc_dbg * dt
        j_a_dv = j_a_dv - rot_eff * dt

        # deltas (position before velocity/rotation updates)
        acc_i = rot_eff @ a_mid
        d_p = d_p + d_v * dt + 0.5 * acc_i * dt * dt
        d_v = d_v + acc_i * dt
        j_g_dr = incr.T @ j_g_dr - j_r * dt
        d_rot = d_rot @ incr
        dt_total += dt

    return PreintegratedImu(
        delta_R=d_rot,
        delta_p=d_p,
        delta_v=d_v,
        dt_total=dt_total,
        J_g_dR=j_g_dr,
        J_g_dv=j_g_dv,
        J_a_dv=j_a_dv,
        J_g_dp=j_g_dp,
        J_a_dp=j_a_dp,
        covariance=0.5 * (cov + cov.T),
        linearization_bias=(b_g, b_a),
    )


def bias_corrected_delta(
    pre: PreintegratedImu, new_bias: tuple[np.ndarray, np.ndarray]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-order corrected (delta_R, delta_p, delta_v) at a new bias."""
    db_g = np.asarray(new_bias[0], dtype=float) - pre.linearization_bias[0]
    db_a = np.asarray(new_bias[1], dtype=float) - pre.linearization_bias[1]
    d_rot = pre.delta_R @ so3_exp(pre.J_g_dR @ db_g)
    d_p = pre.delta_p + pre.J_g_dp @ db_g + pre.J_a_dp @ db_a
    d_v = pre.delta_v + pre.J_g_dv @ db_g + pre.J_a_dv @ db_a
    return d_rot, d_p, d_v


def predict_state(state: NavState, pre: PreintegratedImu, gravity: np.ndarray) -> NavState:
    """Propagate a keyframe state through a preintegrated interval."""
    gravity = np.asarray(gravity, dtype=float)
    d_rot, d_p, d_v = bias_corrected_delta(pre, (state.gyro_bias, state.accel_bias))
    rot_i = state.pose.rotation
    dt = pre.dt_total
    rot = rot_i @ d_rot
    vel = state.velocity + gravity * dt + rot_i @ d_v
    pos = (
        state.pose.translation
        + state.velocity * dt
        + 0.5 * gravity * dt * dt
        + rot_i @ d_p
    )
    return NavState(
        pose=Pose(rot, pos),
        velocity=vel,
        accel_bias=state.accel_bias.copy(),
        gyro_bias=state.gyro_bias.copy(),
    )


def bias_information(noise: ImuNoiseModel, dt_total: float) -> np.ndarray:
    """6x6 information of the bias random-walk residual over one interval.

    Order (accel, gyro), matching the stacked bias residual. Inverse of
    walk^2 * dt per axis.
    """
    dt_total = max(dt_total, 1e-12)
    var = np.concatenate(
        [
            np.full(3, noise.accel_bias_walk**2 * dt_total),
            np.full(3, noise.gyro_bias_walk**2 * dt_total),
        ]
    )
    return np.diag(1.0 / var)


def load_imu_stream(path) -> list[ImuSample]:
    """Read a `t wx wy wz ax ay az` text stream; '#' starts a comment."""
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            vals = [float(p) for p in parts]
            samples.append(
                ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7]))
            )
    return samples


def save_imu_stream(path, samples: list[ImuSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t wx wy wz ax ay az\n")
        for s in samples:
            w = s.angular_velocity
            a = s.linear_acceleration
            fh.write(
                f"{s.timestamp:.9f} {w[0]:.17g} {w[1]:.17g} {w[2]:.17g} "
                f"{a[0]:.17g} {a[1]:.17g} {a[2]:.17g}\n"
            )
