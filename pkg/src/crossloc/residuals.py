"""Error terms of the hybrid localization cost.

Five families: pixel reprojection, IMU preintegration, point-to-plane and
point-to-point map alignment, and the anchor pose prior. Each comes as a
bare function returning (residual, analytic Jacobians) and as a factor
class consumable by the solver. Pose Jacobians are always with respect to
the right perturbation ``P * Exp(delta)`` with tangent order (phi, rho).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imu import NavState, PreintegratedImu, bias_corrected_delta
from .liegroup import (
    Pose,
    se3_log,
    se3_right_jacobian_inv,
    skew,
    so3_left_jacobian_inv,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

__all__ = [
    "NavState",
    "Landmark",
    "Observation",
    "CameraModel",
    "RobustKernel",
    "MapConstraint",
    "BehindCameraError",
    "MetricMismatchError",
    "reprojection_residual",
    "preintegration_residual",
    "point_to_plane_residual",
    "point_to_point_residual",
    "anchor_prior_residual",
    "robust_weight",
    "ReprojectionFactor",
    "StereoReprojectionFactor",
    "PreintegrationFactor",
    "BiasRandomWalkFactor",
    "PointToPlaneFactor",
    "PointToPointFactor",
    "AnchorPriorFactor",
]

POINT_TO_PLANE = "point_to_plane"
POINT_TO_POINT = "point_to_point"


class BehindCameraError(ValueError):
    """Landmark has non-positive depth in the camera frame."""


class MetricMismatchError(ValueError):
    """Constraint metric does not match the residual being evaluated."""


@dataclass(frozen=True)
class Landmark:
    position: np.ndarray
    id: int = -1


@dataclass(frozen=True)
class Observation:
    keyframe_id: int
    landmark_id: int
    pixel: np.ndarray
    information: np.ndarray = field(default_factory=lambda: np.eye(2))


@dataclass(frozen=True)
class CameraModel:
    """Ideal pinhole camera. ``body_t_cam`` maps camera coords to body."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    body_t_cam: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        """Pinhole projection of one (3,) point or an (N, 3) batch."""
        p = np.asarray(p_cam, dtype=float)
        z = p[..., 2]
        return np.stack(
            [self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy],
            axis=-1,
        )

    def in_image(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] <= self.width - 1 - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] <= self.height - 1 - margin)
        )


@dataclass(frozen=True)
class RobustKernel:
    """Loss rho applied to the whitened squared error of one factor."""

    kind: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cauchy", "none"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.scale <= 0.0:
            raise ValueError("kernel scale must be positive")

    def loss(self, squared_error):
        """Return (rho(s), rho'(s)); accepts scalars or arrays."""
        s = np.asarray(squared_error, dtype=float)
        if self.kind == "none":
            return s, np.ones_like(s)
        c2 = self.scale * self.scale
        return c2 * np.log1p(s / c2), 1.0 / (1.0 + s / c2)


def robust_weight(kernel: RobustKernel, squared_error: float) -> tuple[float, float]:
    """Loss value and its first derivative at the given squared error."""
    rho, drho = kernel.loss(squared_error)
    return float(rho), float(drho)


@dataclass(frozen=True)
class MapConstraint:
    """Association of one landmark with one laser-map point."""

    landmark_id: int
    point: np.ndarray
    normal: np.ndarray | None
    information: np.ndarray
    metric: str

    def __post_init__(self):
        if self.metric not in (POINT_TO_PLANE, POINT_TO_POINT):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric == POINT_TO_PLANE:
            if self.normal is None or abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
                raise ValueError("point_to_plane constraint needs a unit normal")


# ---------------------------------------------------------------------------
# reprojection


def _project_with_jacobians(pose: Pose, p_local: np.ndarray, cam: CameraModel, jacobian=True):
    """Project a local-frame point through pose and extrinsic; chain rule."""
    q_body = pose.rotation.T @ (p_local - pose.translation)
    ext = cam.body_t_cam
    p_cam = ext.rotation.T @ (q_body - ext.translation)
    z = p_cam[2]
    if z <= 1e-9:
        raise BehindCameraError(f"depth {z:.3g} not positive")
    uv = np.array([cam.fx * p_cam[0] / z + cam.cx, cam.fy * p_cam[1] / z + cam.cy])
    if not jacobian:
        return uv, None, None
    j_pix = np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * p_cam[0] / (z * z)],
            [0.0, cam.fy / z, -cam.fy * p_cam[1] / (z * z)],
        ]
    )
    j_cam = j_pix @ ext.rotation.T
    j_pose = np.empty((2, 6))
    j_pose[:, :3] = j_cam @ skew(q_body)
    j_pose[:, 3:] = -j_cam
    j_lm = j_cam @ pose.rotation.T
    return uv, j_pose, j_lm


def reprojection_residual(
    state: NavState, lm: Landmark, obs: Observation, cam: CameraModel
):
    """Pixel residual (projected - observed) with pose/landmark Jacobians."""
    uv, j_pose, j_lm = _project_with_jacobians(state.pose, lm.position, cam)
    return uv - obs.pixel, j_pose, j_lm


# ---------------------------------------------------------------------------
# preintegration


def preintegration_residual(
    s_i: NavState, s_k: NavState, pre: PreintegratedImu, gravity: np.ndarray
):
    """9-vector motion residual (e_R, e_p, e_v), 6-vector bias residual,
    and Jacobians of the motion residual keyed by variable name.

    The bias residual stacks (accel, gyro) differences between the two
    keyframes; its Jacobians are +/- identity and left to the caller.
    """
    gravity = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    rot_i = s_i.pose.rotation
    rot_k = s_k.pose.rotation
    d_rot, d_p, d_v = bias_corrected_delta(pre, (s_i.gyro_bias, s_i.accel_bias))

    rel = rot_i.T @ rot_k
    e_rot = so3_log(d_rot.T @ rel)
    w_p = rot_i.T @ (
        s_k.pose.translation
        - s_i.pose.translation
        - s_i.velocity * dt
        - 0.5 * gravity * dt * dt
    )
    e_p = w_p - d_p
    w_v = rot_i.T @ (s_k.velocity - s_i.velocity - gravity * dt)
    e_v = w_v - d_v
    residual = np.concatenate([e_rot, e_p, e_v])
    e_bias = np.concatenate([s_i.accel_bias - s_k.accel_bias, s_i.gyro_bias - s_k.gyro_bias])

    jr_inv = so3_right_jacobian_inv(e_rot)
    db_g = s_i.gyro_bias - pre.linearization_bias[0]
    j = {
        "pose_i": np.zeros((9, 6)),
        "vel_i": np.zeros((9, 3)),
        "gyro_bias_i": np.zeros((9, 3)),
        "accel_bias_i": np.zeros((9, 3)),
        "pose_k": np.zeros((9, 6)),
        "vel_k": np.zeros((9, 3)),
    }
    j["pose_i"][0:3, 0:3] = -jr_inv @ rel.T
    j["pose_i"][3:6, 0:3] = skew(w_p)
    j["pose_i"][3:6, 3:6] = -np.eye(3)
    j["pose_i"][6:9, 0:3] = skew(w_v)
    j["vel_i"][3:6] = -rot_i.T * dt
    j["vel_i"][6:9] = -rot_i.T
    j["gyro_bias_i"][0:3] = (
        -so3_left_jacobian_inv(e_rot)
        @ so3_right_jacobian(pre.J_g_dR @ db_g)
        @ pre.J_g_dR
    )
    j["gyro_bias_i"][3:6] = -pre.J_g_dp
    j["gyro_bias_i"][6:9] = -pre.J_g_dv
    j["accel_bias_i"][3:6] = -pre.J_a_dp
    j["accel_bias_i"][6:9] = -pre.J_a_dv
    j["pose_k"][0:3, 0:3] = jr_inv
    j["pose_k"][3:6, 3:6] = rel
    j["vel_k"][6:9] = rot_i.T
    return residual, e_bias, j


# ---------------------------------------------------------------------------
# map alignment


def point_to_plane_residual(anchor: Pose, lm: Landmark, c: MapConstraint):
    """Signed distance from the anchored landmark to the constraint plane."""
    if c.metric != POINT_TO_PLANE:
        raise MetricMismatchError(f"expected point_to_plane, got {c.metric}")
    n = c.normal
    p_map = anchor.apply(lm.position)
    r_n = float(n @ (c.point - p_map))
    n_rot = n @ anchor.rotation
    j_anchor = np.hstack([n_rot @ skew(lm.position), -n_rot]).reshape(1, 6)
    j_lm = (-n_rot).reshape(1, 3)
    return r_n, j_anchor, j_lm


def point_to_point_residual(anchor: Pose, lm: Landmark, c: MapConstraint):
    """Map point minus anchored landmark; both expressed in the map frame."""
    if c.metric != POINT_TO_POINT:
        raise MetricMismatchError(f"expected point_to_point, got {c.metric}")
    residual = c.point - anchor.apply(lm.position)
    j_anchor = np.hstack([anchor.rotation @ skew(lm.position), -anchor.rotation])
    j_lm = -anchor.rotation
    return residual, j_anchor, j_lm


def anchor_prior_residual(anchor: Pose, prior_mean: Pose, information=None):
    """Tangent-space deviation of the anchor from its prior mean.

    ``information`` weights the squared cost; the raw residual and its
    Jacobian do not depend on it (whitening happens at the factor level).
    """
    residual = se3_log(prior_mean.inverse() @ anchor)
    return residual, se3_right_jacobian_inv(residual)


# ---------------------------------------------------------------------------
# factor classes for the solver


def _sqrt_information(info: np.ndarray):
    """S with S^T S = info; isotropic matrices collapse to a scalar."""
    info = 0.5 * (info + info.T)
    iso = info[0, 0] * np.eye(len(info))
    if info[0, 0] > 0 and np.allclose(info, iso, rtol=1e-12, atol=0.0):
        return float(np.sqrt(info[0, 0]))
    return np.linalg.cholesky(info).T


def _batch_skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


class ReprojectionFactor:
    """Pixel residual between a window pose and a landmark."""

    dim = 2

    def __init__(self, pose_key, lm_key, pixel, camera, kernel=RobustKernel(), sqrt_info=1.0):
        self.blocks = (pose_key, lm_key)
        self.pixel = np.asarray(pixel, dtype=float)
        self.camera = camera
        self.kernel = kernel
        self.sqrt_info = sqrt_info
        self.skipped = False

    def evaluate(self, values, jacobian=True):
        pose = values[self.blocks[0]]
        p_lm = values[self.blocks[1]]
        try:
            uv, j_pose, j_lm = _project_with_jacobians(pose, p_lm, self.camera, jacobian)
        except BehindCameraError:
            self.skipped = True
            return np.zeros(2), [np.zeros((2, 6)), np.zeros((2, 3))]
        return uv - self.pixel, [j_pose, j_lm] if jacobian else None


class StereoReprojectionFactor:
    """Stacked left/right pixel residual of one stereo observation.

    Each view contributes the plain reprojection residual; stacking them
    makes landmark depth observable from a single keyframe.
    """

    dim = 4

    def __init__(self, pose_key, lm_key, pixels, cam_left, cam_right,
                 kernel=RobustKernel(), sqrt_info=1.0):
        self.blocks = (pose_key, lm_key)
        self.pixels = np.asarray(pixels, dtype=float)  # (ul, vl, ur, vr)
        self.cams = (cam_left, cam_right)
        self.kernel = kernel
        self.sqrt_info = sqrt_info
        self.skipped = False

    def evaluate(self, values, jacobian=True):
        pose = values[self.blocks[0]]
        p_lm = values[self.blocks[1]]
        residual = np.zeros(4)
        j_pose = np.zeros((4, 6))
        j_lm = np.zeros((4, 3))
        try:
            for c, cam in enumerate(self.cams):
                uv, jp, jl = _project_with_jacobians(pose, p_lm, cam, jacobian)
                residual[2 * c : 2 * c + 2] = uv - self.pixels[2 * c : 2 * c + 2]
                if jacobian:
                    j_pose[2 * c : 2 * c + 2] = jp
                    j_lm[2 * c : 2 * c + 2] = jl
        except BehindCameraError:
            self.skipped = True
            return np.zeros(4), [j_pose * 0.0, j_lm * 0.0]
        return residual, [j_pose, j_lm] if jacobian else None

    def batch_key(self):
        return (id(self.cams[0]), id(self.cams[1]))

    @classmethod
    def evaluate_batch(cls, factors, values, jacobian=True):
        """Vectorized evaluation of many stereo factors at once."""
        n = len(factors)
        rot = np.stack([values[f.blocks[0]].rotation for f in factors])
        trans = np.stack([values[f.blocks[0]].translation for f in factors])
        p_lm = np.stack([values[f.blocks[1]] for f in factors])
        pixels = np.stack([f.pixels for f in factors])
        q_body = np.einsum("nj,nji->ni", p_lm - trans, rot)
        residual = np.zeros((n, 4))
        j_pose = np.zeros((n, 4, 6)) if jacobian else None
        j_lm = np.zeros((n, 4, 3)) if jacobian else None
        bad = np.zeros(n, dtype=bool)
        sk_q = _batch_skew(q_body) if jacobian else None
        for c, cam in enumerate(factors[0].cams):
            ext = cam.body_t_cam
            p_cam = (q_body - ext.translation) @ ext.rotation
            z = p_cam[:, 2]
            bad |= z <= 1e-9
            z = np.where(z <= 1e-9, 1.0, z)
            uv = np.stack(
                [cam.fx * p_cam[:, 0] / z + cam.cx, cam.fy * p_cam[:, 1] / z + cam.cy],
                axis=1,
            )
            residual[:, 2 * c : 2 * c + 2] = uv - pixels[:, 2 * c : 2 * c + 2]
            if jacobian:
                j_pix = np.zeros((n, 2, 3))
                j_pix[:, 0, 0] = cam.fx / z
                j_pix[:, 0, 2] = -cam.fx * p_cam[:, 0] / (z * z)
                j_pix[:, 1, 1] = cam.fy / z
                j_pix[:, 1, 2] = -cam.fy * p_cam[:, 1] / (z * z)
                j_cam = j_pix @ ext.rotation.T
                j_pose[:, 2 * c : 2 * c + 2, :3] = j_cam @ sk_q
                j_pose[:, 2 * c : 2 * c + 2, 3:] = -j_cam
                j_lm[:, 2 * c : 2 * c + 2, :] = np.einsum("nij,nkj->nik", j_cam, rot)
        if bad.any():
            residual[bad] = 0.0
            if jacobian:
                j_pose[bad] = 0.0
                j_lm[bad] = 0.0
            for i in np.nonzero(bad)[0]:
                factors[i].skipped = True
        return residual, [j_pose, j_lm]


class PreintegrationFactor:
    """9-dof relative-motion residual between two keyframes."""

    dim = 9

    def __init__(self, keys, pre, gravity, kernel=RobustKernel()):
        # keys: (pose_i, vel_i, gyro_bias_i, accel_bias_i, pose_k, vel_k)
        self.blocks = tuple(keys)
        self.pre = pre
        self.gravity = np.asarray(gravity, dtype=float)
        self.kernel = kernel
        self.sqrt_info = _sqrt_information(pre.information())

    def evaluate(self, values, jacobian=True):
        pi, vi, bgi, bai, pk, vk = (values[k] for k in self.blocks)
        s_i = NavState(pose=pi, velocity=vi, accel_bias=bai, gyro_bias=bgi)
        s_k = NavState(pose=pk, velocity=vk)
        residual, _, j = preintegration_residual(s_i, s_k, self.pre, self.gravity)
        jacs = [
            j["pose_i"],
            j["vel_i"],
            j["gyro_bias_i"],
            j["accel_bias_i"],
            j["pose_k"],
            j["vel_k"],
        ]
        return residual, jacs


class BiasRandomWalkFactor:
    """Bias consistency between consecutive keyframes, (accel, gyro) order."""

    dim = 6

    def __init__(self, keys, information, kernel=RobustKernel()):
        # keys: (accel_bias_i, gyro_bias_i, accel_bias_k, gyro_bias_k)
        self.blocks = tuple(keys)
        self.kernel = kernel
        self.sqrt_info = _sqrt_information(information)

    def evaluate(self, values, jacobian=True):
        bai, bgi, bak, bgk = (values[k] for k in self.blocks)
        residual = np.concatenate([bai - bak, bgi - bgk])
        jacs = [
            np.vstack([np.eye(3), np.zeros((3, 3))]),
            np.vstack([np.zeros((3, 3)), np.eye(3)]),
            np.vstack([-np.eye(3), np.zeros((3, 3))]),
            np.vstack([np.zeros((3, 3)), -np.eye(3)]),
        ]
        return residual, jacs


class PointToPlaneFactor:
    """Plane-distance residual vector r_n * n with a 3x3 information."""

    dim = 3

    def __init__(self, anchor_key, lm_key, constraint, kernel=RobustKernel()):
        self.blocks = (anchor_key, lm_key)
        self.constraint = constraint
        self.kernel = kernel
        self.sqrt_info = _sqrt_information(constraint.information)

    def evaluate(self, values, jacobian=True):
        anchor = values[self.blocks[0]]
        c = self.constraint
        if not jacobian:
            r_n = c.normal @ (c.point - anchor.apply(values[self.blocks[1]]))
            return r_n * c.normal, None
        lm = Landmark(values[self.blocks[1]], c.landmark_id)
        r_n, j_anchor, j_lm = point_to_plane_residual(anchor, lm, c)
        n = c.normal.reshape(3, 1)
        return r_n * c.normal, [n @ j_anchor, n @ j_lm]

    def batch_key(self):
        return self.blocks[0]

    @classmethod
    def evaluate_batch(cls, factors, values, jacobian=True):
        """Vectorized evaluation; all factors must share the anchor block."""
        anchor = values[factors[0].blocks[0]]
        p_lm = np.stack([values[f.blocks[1]] for f in factors])
        targets = np.stack([f.constraint.point for f in factors])
        normals = np.stack([f.constraint.normal for f in factors])
        p_map = p_lm @ anchor.rotation.T + anchor.translation
        r_n = np.einsum("ni,ni->n", normals, targets - p_map)
        residual = r_n[:, None] * normals
        if not jacobian:
            return residual, None
        n_rot = normals @ anchor.rotation
        row = np.concatenate([np.cross(n_rot, p_lm), -n_rot], axis=1)  # (n, 6)
        j_anchor = normals[:, :, None] * row[:, None, :]
        j_lm = normals[:, :, None] * (-n_rot)[:, None, :]
        return residual, [j_anchor, j_lm]


class PointToPointFactor:
    """Euclidean residual between map point and anchored landmark."""

    dim = 3

    def __init__(self, anchor_key, lm_key, constraint, kernel=RobustKernel()):
        self.blocks = (anchor_key, lm_key)
        self.constraint = constraint
        self.kernel = kernel
        self.sqrt_info = _sqrt_information(constraint.information)

    def evaluate(self, values, jacobian=True):
        anchor = values[self.blocks[0]]
        c = self.constraint
        if not jacobian:
            return c.point - anchor.apply(values[self.blocks[1]]), None
        lm = Landmark(values[self.blocks[1]], c.landmark_id)
        residual, j_anchor, j_lm = point_to_point_residual(anchor, lm, c)
        return residual, [j_anchor, j_lm]

    def batch_key(self):
        return self.blocks[0]

    @classmethod
    def evaluate_batch(cls, factors, values, jacobian=True):
        """Vectorized evaluation; all factors must share the anchor block."""
        anchor = values[factors[0].blocks[0]]
        p_lm = np.stack([values[f.blocks[1]] for f in factors])
        targets = np.stack([f.constraint.point for f in factors])
        residual = targets - (p_lm @ anchor.rotation.T + anchor.translation)
        if not jacobian:
            return residual, None
        j_anchor = np.concatenate(
            [np.einsum("ij,njk->nik", anchor.rotation, _batch_skew(p_lm)),
             np.broadcast_to(-anchor.rotation, (len(factors), 3, 3)).copy()],
            axis=2,
        )
        j_lm = np.broadcast_to(-anchor.rotation, (len(factors), 3, 3)).copy()
        return residual, [j_anchor, j_lm]


class AnchorPriorFactor:
    """Keeps the anchor near the previous step's converged estimate."""

    dim = 6

    def __init__(self, anchor_key, prior_mean, information, kernel=RobustKernel()):
        self.blocks = (anchor_key,)
        self.prior_mean = prior_mean
        self.kernel = kernel
        self.sqrt_info = _sqrt_information(information)

    def evaluate(self, values, jacobian=True):
        residual, jac = anchor_prior_residual(
            values[self.blocks[0]], self.prior_mean, None
        )
        return residual, [jac]
