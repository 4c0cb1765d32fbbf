"""Deterministic synthetic world and multi-session sensor data generator.

The world is a set of labeled geometric elements (planar patches, poles,
boxes, scatter clusters). Static elements exist in every session,
semi-static ones only in their session set, dynamic ones move and affect
laser returns only. Feature points are sampled once per world (seeded by
the world seed), so the same physical features reappear across sessions.

A trajectory is a C2 cubic spline through waypoints traversed at a spline
speed profile; angular velocity and acceleration come from analytic spline
derivatives, so synthesized IMU streams are consistent with the sampled
ground truth up to integration error only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .imu import ImuSample
from .laser_map import FRAME_MAP, PointCloudMap, _canonical_sign
from .liegroup import Pose, rot_z
from .residuals import CameraModel
from .session import FrameObservations, LaserModel, SensorRig, SessionData

KIND_STATIC = "static"
KIND_SEMI_STATIC = "semi_static"
KIND_DYNAMIC = "dynamic"
KIND_GROUND = "ground"


# ---------------------------------------------------------------------------
# world elements


@dataclass(frozen=True)
class PlanarPatch:
    """Rectangle spanned by two orthogonal edges from an origin corner."""

    elem_id: int
    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    feature_density: float = 0.0  # features per m^2
    kind: str = KIND_STATIC
    sessions: tuple | None = None

    def __post_init__(self):
        if abs(float(self.edge_u @ self.edge_v)) > 1e-9:
            raise ValueError("patch edges must be orthogonal")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(self.edge_u) * np.linalg.norm(self.edge_v))


@dataclass(frozen=True)
class Pole:
    """Vertical-ish cylinder from base to tip."""

    elem_id: int
    base: np.ndarray
    tip: np.ndarray
    radius: float
    feature_density: float = 0.0  # features per m of height
    kind: str = KIND_STATIC
    sessions: tuple | None = None


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; dynamic boxes oscillate along a direction."""

    elem_id: int
    center: np.ndarray
    size: np.ndarray  # full extents
    feature_density: float = 0.0  # features per m^2 of lateral faces
    kind: str = KIND_STATIC
    sessions: tuple | None = None
    motion_direction: np.ndarray | None = None
    motion_amplitude: float = 0.0
    motion_period: float = 1.0

    def center_at(self, t: float) -> np.ndarray:
        if self.kind != KIND_DYNAMIC or self.motion_direction is None:
            return self.center
        phase = math.sin(2.0 * math.pi * t / self.motion_period)
        return self.center + self.motion_direction * (self.motion_amplitude * phase)


@dataclass(frozen=True)
class ScatterCluster:
    """Blob of small spheres (bushes, clutter); points double as features."""

    elem_id: int
    center: np.ndarray
    extent: np.ndarray
    count: int
    point_radius: float = 0.04
    feature_density: float = 0.0  # > 0 makes every point a feature
    kind: str = KIND_STATIC
    sessions: tuple | None = None


class WorldModel:
    """Element collection with cached, seed-deterministic feature points."""

    def __init__(self, elements, seed: int = 0):
        self.elements = list(elements)
        self.seed = seed
        ids = [e.elem_id for e in self.elements]
        if len(ids) != len(set(ids)):
            raise ValueError("element ids must be unique")
        self._features = None

    def element_present(self, elem, session_id: int) -> bool:
        if elem.kind == KIND_SEMI_STATIC:
            return elem.sessions is not None and session_id in elem.sessions
        return True

    def element_kinds(self) -> dict:
        return {e.elem_id: (e.kind, e.sessions) for e in self.elements}

    def scatter_points(self, elem: ScatterCluster) -> np.ndarray:
        rng = np.random.default_rng([self.seed, elem.elem_id, 101])
        return elem.center + rng.uniform(-1, 1, size=(elem.count, 3)) * (elem.extent / 2.0)

    # -- feature points -----------------------------------------------------
    def feature_points(self):
        """(ids, positions (F,3), element id per feature), world-stable."""
        if self._features is not None:
            return self._features
        positions = []
        elem_ids = []
        for elem in self.elements:
            pts = self._element_features(elem)
            positions.extend(pts)
            elem_ids.extend([elem.elem_id] * len(pts))
        positions = np.asarray(positions, dtype=float).reshape(len(elem_ids), 3)
        ids = np.arange(len(elem_ids))
        self._features = (ids, positions, np.asarray(elem_ids, dtype=int))
        return self._features

    def _element_features(self, elem):
        if elem.feature_density <= 0.0:
            return []
        rng = np.random.default_rng([self.seed, elem.elem_id, 7])
        if isinstance(elem, PlanarPatch):
            count = int(round(elem.feature_density * elem.area))
            r = rng.uniform(size=(count, 2))
            return list(elem.origin + r[:, :1] * elem.edge_u + r[:, 1:] * elem.edge_v)
        if isinstance(elem, Pole):
            axis = elem.tip - elem.base
            height = np.linalg.norm(axis)
            axis = axis / height
            e1 = np.cross(axis, [1.0, 0.0, 0.0])
            if np.linalg.norm(e1) < 1e-6:
                e1 = np.cross(axis, [0.0, 1.0, 0.0])
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(axis, e1)
            count = int(round(elem.feature_density * height))
            h = rng.uniform(0, height, size=count)
            ang = rng.uniform(0, 2 * np.pi, size=count)
            return list(
                elem.base
                + h[:, None] * axis
                + elem.radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
            )
        if isinstance(elem, Box):
            half = elem.size / 2.0
            faces = []
            # four lateral faces: (axis, sign)
            for axis, other in ((0, 1), (1, 0)):
                for sign in (-1.0, 1.0):
                    faces.append((axis, other, sign))
            areas = [elem.size[other] * elem.size[2] for _, other, _ in faces]
            count = int(round(elem.feature_density * sum(areas)))
            pts = []
            choice = rng.choice(len(faces), size=count, p=np.array(areas) / sum(areas))
            for f in choice:
                axis, other, sign = faces[f]
                p = np.array(elem.center, dtype=float)
                p[axis] += sign * half[axis]
                p[other] += rng.uniform(-half[other], half[other])
                p[2] += rng.uniform(-half[2], half[2])
                pts.append(p)
            return pts
        if isinstance(elem, ScatterCluster):
            return list(self.scatter_points(elem))
        return []

    def features_for_session(self, session_id: int):
        ids, positions, elem_ids = self.feature_points()
        by_id = {e.elem_id: e for e in self.elements}
        keep = np.array(
            [self.element_present(by_id[e], session_id) for e in elem_ids], dtype=bool
        )
        return ids[keep], positions[keep], elem_ids[keep]


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: np.ndarray  # (K, 3); first == last closes the loop
    speed: float | np.ndarray = 2.0  # scalar or per-waypoint (m/s)
    direction: str = "forward"

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[0] < 2 or wp.shape[1] != 3:
            raise ValueError("waypoints must be (K>=2, 3)")
        speeds = np.atleast_1d(np.asarray(self.speed, dtype=float))
        if np.any(speeds <= 0):
            raise ValueError("speeds must be positive")
        if self.direction not in ("forward", "reverse"):
            raise ValueError("direction must be forward or reverse")


@dataclass
class SampledTrajectory:
    """Ground truth on the IMU clock; frames subsample every ``stride``."""

    imu_times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    yaws: np.ndarray
    yaw_rates: np.ndarray
    stride: int

    @property
    def frame_times(self) -> np.ndarray:
        return self.imu_times[:: self.stride]

    def frame_indices(self, n_frames: int) -> np.ndarray:
        return np.arange(n_frames) * self.stride

    def pose_at(self, imu_index: int) -> Pose:
        return Pose(rot_z(self.yaws[imu_index]), self.positions[imu_index].copy())

    def frame_poses(self, n_frames: int):
        return [self.pose_at(i) for i in self.frame_indices(n_frames)]


class TrajectorySampler:
    """C2 time-parameterized spline through waypoints.

    Waypoint times come from chord lengths and the speed profile, and the
    path is splined directly against time, so sampled velocities and
    accelerations are exact derivatives of the sampled positions (no ODE
    integration between the two). Closed loops (first waypoint == last)
    wrap periodically.
    """

    def __init__(self, spec: TrajectorySpec, imu_rate: float, frame_rate: float):
        if imu_rate <= 0 or frame_rate <= 0:
            raise ValueError("rates must be positive")
        if abs(imu_rate / frame_rate - round(imu_rate / frame_rate)) > 1e-9:
            raise ValueError("imu_rate must be an integer multiple of frame_rate")
        self.imu_rate = float(imu_rate)
        self.frame_rate = float(frame_rate)
        self.stride = int(round(imu_rate / frame_rate))

        wp = np.array(spec.waypoints, dtype=float)
        if spec.direction == "reverse":
            wp = wp[::-1]
        self.closed = bool(np.allclose(wp[0], wp[-1], atol=1e-12))
        if self.closed:
            wp[-1] = wp[0]  # scipy's periodic bc requires exact equality
        chord = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        if np.any(chord <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        speeds = np.atleast_1d(np.asarray(spec.speed, dtype=float))
        if speeds.size == 1:
            speeds = np.full(len(wp), speeds[0])
        elif speeds.size != len(wp):
            raise ValueError("speed profile must be scalar or one per waypoint")
        if spec.direction == "reverse":
            speeds = speeds[::-1]
        seg_time = chord / (0.5 * (speeds[:-1] + speeds[1:]))
        knots = np.concatenate([[0.0], np.cumsum(seg_time)])
        self.total_time = float(knots[-1])
        bc = "periodic" if self.closed else "natural"
        self.path = CubicSpline(knots, wp, bc_type=bc, axis=0)
        self._d_path = self.path.derivative()
        self._dd_path = self._d_path.derivative()

    def _wrap(self, t):
        if self.closed:
            return np.mod(t, self.total_time)
        return np.clip(t, 0.0, self.total_time)

    def states_at(self, times):
        """Vectorized (pos, vel, acc, yaw, yaw_rate) at the given times."""
        tw = self._wrap(np.asarray(times, dtype=float))
        pos = self.path(tw)
        vel = self._d_path(tw)
        acc = self._dd_path(tw)
        yaw = np.arctan2(vel[..., 1], vel[..., 0])
        denom = vel[..., 0] ** 2 + vel[..., 1] ** 2
        denom = np.maximum(denom, 1e-18)
        yaw_rate = (vel[..., 0] * acc[..., 1] - vel[..., 1] * acc[..., 0]) / denom
        return pos, vel, acc, yaw, yaw_rate

    def sample(self, duration: float) -> SampledTrajectory:
        """Ground truth at IMU rate over [0, duration)."""
        n_imu = int(round(duration * self.imu_rate))
        times = np.arange(n_imu) / self.imu_rate
        pos, vel, acc, yaw, yaw_rate = self.states_at(times)
        return SampledTrajectory(times, pos, vel, acc, yaw, yaw_rate, self.stride)


def generate_trajectory(spec: TrajectorySpec, imu_rate: float, frame_rate: float) -> TrajectorySampler:
    return TrajectorySampler(spec, imu_rate, frame_rate)


# ---------------------------------------------------------------------------
# IMU synthesis


def synthesize_imu(
    sampled: SampledTrajectory, rig: SensorRig, seed: int, session_id: int = 0, noise: bool = True
):
    """IMU stream consistent with the sampled trajectory.

    Returns (samples, gyro_bias_series, accel_bias_series); the bias series
    are the ground-truth random walks actually applied.
    """
    rng = np.random.default_rng([seed, session_id, 11])
    n = len(sampled.imu_times)
    dt = 1.0 / rig.imu_rate
    gravity = rig.gravity_vector()
    nm = rig.imu_noise
    gyro_noise = np.zeros((n, 3))
    accel_noise = np.zeros((n, 3))
    bias_g = np.zeros((n, 3))
    bias_a = np.zeros((n, 3))
    if noise:
        gyro_noise = rng.normal(0.0, nm.gyro_noise_density / math.sqrt(dt), size=(n, 3))
        accel_noise = rng.normal(0.0, nm.accel_noise_density / math.sqrt(dt), size=(n, 3))
        bias_g = np.cumsum(rng.normal(0.0, nm.gyro_bias_walk * math.sqrt(dt), size=(n, 3)), axis=0)
        bias_a = np.cumsum(rng.normal(0.0, nm.accel_bias_walk * math.sqrt(dt), size=(n, 3)), axis=0)
    samples = []
    for i, t in enumerate(sampled.imu_times):
        rot = rot_z(sampled.yaws[i])
        omega = np.array([0.0, 0.0, sampled.yaw_rates[i]]) + bias_g[i] + gyro_noise[i]
        force = rot.T @ (sampled.accelerations[i] - gravity) + bias_a[i] + accel_noise[i]
        samples.append(ImuSample(float(t), omega, force))
    return samples, bias_g, bias_a


# ---------------------------------------------------------------------------
# camera synthesis


def synthesize_camera(
    sampled: SampledTrajectory,
    world: WorldModel,
    rig: SensorRig,
    session_id: int,
    seed: int,
    n_frames: int,
    pixel_sigma: float = 0.5,
    outlier_fraction: float = 0.0,
    max_feature_range: float = 20.0,
):
    """Per-frame stereo observations of the session's visible features."""
    rng = np.random.default_rng([seed, session_id, 23])
    ids, positions, _ = world.features_for_session(session_id)
    cams = (rig.camera, rig.right_camera())
    frames = []
    for k in sampled.frame_indices(n_frames):
        body_pose = Pose(rot_z(sampled.yaws[k]), sampled.positions[k])
        uv_pair = []
        visible = np.ones(len(ids), dtype=bool)
        for cam in cams:
            world_t_cam = body_pose @ cam.body_t_cam
            p_cam = (positions - world_t_cam.translation) @ world_t_cam.rotation
            depth_ok = p_cam[:, 2] > 0.2
            rng_ok = np.linalg.norm(p_cam, axis=1) <= max_feature_range
            with np.errstate(divide="ignore", invalid="ignore"):
                uv = np.stack(
                    [
                        cam.fx * p_cam[:, 0] / p_cam[:, 2] + cam.cx,
                        cam.fy * p_cam[:, 1] / p_cam[:, 2] + cam.cy,
                    ],
                    axis=1,
                )
            visible &= depth_ok & rng_ok & cam.in_image(np.nan_to_num(uv, nan=-1.0))
            uv_pair.append(uv)
        sel = np.nonzero(visible)[0]
        pixels = np.concatenate([uv_pair[0][sel], uv_pair[1][sel]], axis=1)
        if pixel_sigma > 0:
            pixels = pixels + rng.normal(0.0, pixel_sigma, size=pixels.shape)
        if outlier_fraction > 0 and len(sel) > 0:
            bad = rng.uniform(size=len(sel)) < outlier_fraction
            n_bad = int(bad.sum())
            if n_bad:
                w, h = rig.camera.width, rig.camera.height
                pixels[bad] = np.column_stack(
                    [
                        rng.uniform(0, w - 1, n_bad),
                        rng.uniform(0, h - 1, n_bad),
                        rng.uniform(0, w - 1, n_bad),
                        rng.uniform(0, h - 1, n_bad),
                    ]
                )
        frames.append(FrameObservations(ids[sel].copy(), pixels))
    return frames


# ---------------------------------------------------------------------------
# laser synthesis


def laser_ray_directions(laser: LaserModel) -> np.ndarray:
    """Unit ray directions in the laser frame, channel-major."""
    elev = np.deg2rad(
        np.linspace(laser.elevation_min_deg, laser.elevation_max_deg, laser.channels)
    )
    azim = np.deg2rad(np.arange(0.0, 360.0, laser.azimuth_step_deg))
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    return np.stack(
        [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
    ).reshape(-1, 3)


def _ray_patch(origin, dirs, patch: PlanarPatch):
    n = patch.normal
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((patch.origin - origin) @ n) / denom
    t = np.where(np.abs(denom) < 1e-12, np.inf, t)
    finite = np.isfinite(t)
    tf = np.where(finite, t, 0.0)
    p = origin + tf[:, None] * dirs
    rel = p - patch.origin
    lu2 = float(patch.edge_u @ patch.edge_u)
    lv2 = float(patch.edge_v @ patch.edge_v)
    a = (rel @ patch.edge_u) / lu2
    b = (rel @ patch.edge_v) / lv2
    ok = finite & (t > 1e-9) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
    return np.where(ok, t, np.inf)


def _ray_cylinder(origin, dirs, base, tip, radius):
    axis = tip - base
    length = np.linalg.norm(axis)
    axis = axis / length
    oc = origin - base
    d_par = dirs @ axis
    d_perp = dirs - d_par[:, None] * axis
    oc_par = float(oc @ axis)
    oc_perp = oc - oc_par * axis
    a = np.einsum("ij,ij->i", d_perp, d_perp)
    b = 2.0 * (d_perp @ oc_perp)
    c = float(oc_perp @ oc_perp) - radius * radius
    disc = b * b - 4.0 * a * c
    t_out = np.full(len(dirs), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for sign in (-1.0, 1.0):
        t = (-b + sign * sq) / (2.0 * np.where(ok, a, 1.0))
        s = oc_par + t * d_par
        good = ok & (t > 1e-9) & (s >= 0.0) & (s <= length) & (t < t_out)
        t_out[good] = t[good]
    return t_out


def _ray_box(origin, dirs, center, size):
    half = size / 2.0
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (lo - origin)[None, :] * inv
    t2 = (hi - origin)[None, :] * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, np.inf)


def _ray_spheres(origin, dirs, centers, radius):
    oc = origin[None, :] - centers  # (m, 3)
    b = 2.0 * (dirs @ oc.T)  # (r, m)
    c = np.einsum("mj,mj->m", oc, oc) - radius * radius  # (m,)
    disc = b * b - 4.0 * c[None, :]
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-b - sq) / 2.0
    t2 = (-b + sq) / 2.0
    t = np.where(t1 > 1e-9, t1, t2)
    t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
    return t.min(axis=1)


def cast_rays(origin, dirs, world: WorldModel, session_id: int, t_scan: float):
    """Nearest-hit distances and element ids (-1 for miss)."""
    origin = np.asarray(origin, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    best_t = np.full(len(dirs), np.inf)
    best_id = np.full(len(dirs), -1, dtype=int)
    for elem in world.elements:
        if not world.element_present(elem, session_id):
            continue
        if isinstance(elem, PlanarPatch):
            t = _ray_patch(origin, dirs, elem)
        elif isinstance(elem, Pole):
            t = _ray_cylinder(origin, dirs, elem.base, elem.tip, elem.radius)
        elif isinstance(elem, Box):
            t = _ray_box(origin, dirs, elem.center_at(t_scan), elem.size)
        elif isinstance(elem, ScatterCluster):
            t = _ray_spheres(origin, dirs, world.scatter_points(elem), elem.point_radius)
        else:
            continue
        better = t < best_t
        best_t[better] = t[better]
        best_id[better] = elem.elem_id
    return best_t, best_id


def synthesize_laser(
    sampled: SampledTrajectory,
    world: WorldModel,
    rig: SensorRig,
    session_id: int,
    seed: int,
    n_frames: int,
    noise: bool = True,
):
    """Per-frame scans: (points in the laser frame, element labels)."""
    rng = np.random.default_rng([seed, session_id, 37])
    dirs_f = laser_ray_directions(rig.laser)
    body_t_laser = rig.body_t_laser
    scans = []
    for k in sampled.frame_indices(n_frames):
        t_scan = float(sampled.imu_times[k])
        body_pose = Pose(rot_z(sampled.yaws[k]), sampled.positions[k])
        world_t_laser = body_pose @ body_t_laser
        dirs_g = dirs_f @ world_t_laser.rotation.T
        t_hit, labels = cast_rays(world_t_laser.translation, dirs_g, world, session_id, t_scan)
        ok = np.isfinite(t_hit) & (t_hit <= rig.laser.max_range)
        ranges = t_hit[ok]
        if noise and rig.laser.range_noise > 0:
            ranges = ranges + rng.normal(0.0, rig.laser.range_noise, size=ranges.shape)
        points_f = dirs_f[ok] * ranges[:, None]
        scans.append((points_f, labels[ok]))
    return scans


# ---------------------------------------------------------------------------
# whole sessions


def generate_session(
    world: WorldModel,
    spec: TrajectorySpec,
    rig: SensorRig,
    session_id: int,
    seed: int,
    duration: float = 60.0,
    pixel_sigma: float = 0.5,
    outlier_fraction: float = 0.0,
    noise: bool = True,
) -> SessionData:
    """Bundle IMU, camera, laser and ground truth for one traversal."""
    sampler = generate_trajectory(spec, rig.imu_rate, rig.frame_rate)
    sampled = sampler.sample(duration)
    n_frames = int(round(duration * rig.frame_rate))
    imu_samples, _, _ = synthesize_imu(sampled, rig, seed, session_id, noise=noise)
    frames = synthesize_camera(
        sampled,
        world,
        rig,
        session_id,
        seed,
        n_frames,
        pixel_sigma=pixel_sigma if noise else 0.0,
        outlier_fraction=outlier_fraction if noise else 0.0,
    )
    scans = synthesize_laser(sampled, world, rig, session_id, seed, n_frames, noise=noise)
    return SessionData(
        session_id=session_id,
        rig=rig,
        gt_times=sampled.frame_times[:n_frames].copy(),
        gt_poses=sampled.frame_poses(n_frames),
        imu_samples=imu_samples,
        frames=frames,
        scans=scans,
        element_kinds=world.element_kinds(),
    )


# ---------------------------------------------------------------------------
# analytic ("true") map sampling


def sample_world_map(
    world: WorldModel, spacing: float = 0.4, session_id: int | None = None
) -> PointCloudMap:
    """Grid-sample element surfaces with analytic normals and labels.

    ``session_id=None`` keeps only always-present geometry (static and
    ground); otherwise semi-static elements of that session are included.
    Dynamic elements are never sampled.
    """
    positions, normals, grounds, labels = [], [], [], []
    for elem in world.elements:
        if elem.kind == KIND_DYNAMIC:
            continue
        if elem.kind == KIND_SEMI_STATIC and (
            session_id is None or not world.element_present(elem, session_id)
        ):
            continue
        if isinstance(elem, PlanarPatch):
            lu = np.linalg.norm(elem.edge_u)
            lv = np.linalg.norm(elem.edge_v)
            nu = max(2, int(round(lu / spacing)) + 1)
            nv = max(2, int(round(lv / spacing)) + 1)
            a, b = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv), indexing="ij")
            pts = elem.origin + a.reshape(-1, 1) * elem.edge_u + b.reshape(-1, 1) * elem.edge_v
            nrm = np.tile(elem.normal, (len(pts), 1))
        elif isinstance(elem, Pole):
            # curved surfaces take the point-to-point branch downstream, so
            # sample them finer than planes to keep nearest-sample error small
            fine = spacing / 3.0
            axis = elem.tip - elem.base
            height = np.linalg.norm(axis)
            axis_u = axis / height
            e1 = np.cross(axis_u, [1.0, 0.0, 0.0])
            if np.linalg.norm(e1) < 1e-6:
                e1 = np.cross(axis_u, [0.0, 1.0, 0.0])
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(axis_u, e1)
            n_h = max(2, int(round(height / fine)) + 1)
            n_c = max(8, int(round(2 * np.pi * elem.radius / fine)))
            hh = np.linspace(0, height, n_h)
            ang = np.arange(n_c) * (2 * np.pi / n_c)
            hh, ang = np.meshgrid(hh, ang, indexing="ij")
            radial = np.cos(ang).reshape(-1, 1) * e1 + np.sin(ang).reshape(-1, 1) * e2
            pts = elem.base + hh.reshape(-1, 1) * axis_u + elem.radius * radial
            nrm = radial
        elif isinstance(elem, Box):
            half = elem.size / 2.0
            pts_list, nrm_list = [], []
            for axis in range(3):
                for sign in (-1.0, 1.0):
                    if axis == 2 and sign < 0:
                        continue  # skip the bottom face
                    o1, o2 = [i for i in range(3) if i != axis]
                    n1 = max(2, int(round(elem.size[o1] / spacing)) + 1)
                    n2 = max(2, int(round(elem.size[o2] / spacing)) + 1)
                    g1, g2 = np.meshgrid(
                        np.linspace(-half[o1], half[o1], n1),
                        np.linspace(-half[o2], half[o2], n2),
                        indexing="ij",
                    )
                    pts_f = np.tile(elem.center, (g1.size, 1))
                    pts_f[:, axis] += sign * half[axis]
                    pts_f[:, o1] += g1.ravel()
                    pts_f[:, o2] += g2.ravel()
                    nrm_f = np.zeros((g1.size, 3))
                    nrm_f[:, axis] = sign
                    pts_list.append(pts_f)
                    nrm_list.append(nrm_f)
            pts = np.concatenate(pts_list)
            nrm = np.concatenate(nrm_list)
        elif isinstance(elem, ScatterCluster):
            pts = world.scatter_points(elem)
            nrm = np.full((len(pts), 3), np.nan)
        else:
            continue
        positions.append(pts)
        valid = ~np.isnan(nrm[:, 0])
        nrm[valid] = _canonical_sign(nrm[valid])
        normals.append(nrm)
        grounds.append(np.full(len(pts), elem.kind == KIND_GROUND, dtype=bool))
        labels.append(np.full(len(pts), elem.elem_id, dtype=int))
    return PointCloudMap(
        np.concatenate(positions),
        np.concatenate(normals),
        np.ones(sum(len(p) for p in positions), dtype=int),
        np.concatenate(grounds),
        FRAME_MAP,
        np.concatenate(labels),
    )


# ---------------------------------------------------------------------------
# default scene


def _rounded_rectangle_waypoints(half_x, half_y, corner_radius, spacing, z):
    """Closed loop of waypoints along a rounded rectangle, CCW."""
    hx, hy, r = half_x, half_y, corner_radius
    segs = []
    # straights: +y side right-to-left ... use CCW starting at (hx - r, -hy)
    corners = [
        (np.array([hx - r, -hy + r]), -np.pi / 2),
        (np.array([hx - r, hy - r]), 0.0),
        (np.array([-hx + r, hy - r]), np.pi / 2),
        (np.array([-hx + r, -hy + r]), np.pi),
    ]
    pts = []
    for (c, start_ang), (c_next, _) in zip(corners, corners[1:] + corners[:1]):
        # quarter arc around c from start_ang
        arc_len = 0.5 * np.pi * r
        n_arc = max(2, int(round(arc_len / spacing)))
        for i in range(n_arc):
            ang = start_ang + 0.5 * np.pi * i / n_arc
            pts.append(c + r * np.array([np.cos(ang), np.sin(ang)]))
        # straight from end of this arc to start of next arc
        p0 = c + r * np.array([np.cos(start_ang + np.pi / 2), np.sin(start_ang + np.pi / 2)])
        p1 = c_next + r * np.array([np.cos(start_ang + np.pi / 2), np.sin(start_ang + np.pi / 2)])
        seg = p1 - p0
        length = np.linalg.norm(seg)
        n_seg = max(1, int(round(length / spacing)))
        for i in range(n_seg):
            pts.append(p0 + seg * (i / n_seg))
    pts.append(pts[0].copy())
    out = np.zeros((len(pts), 3))
    out[:, :2] = np.asarray(pts)
    out[:, 2] = z
    return out


BODY_HEIGHT = 0.5


def default_rig() -> SensorRig:
    """Forward-looking stereo camera, body-aligned laser, desk-scale rates."""
    r_bc = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    body_t_cam = Pose(r_bc, np.array([0.3, 0.15, 0.1]))
    cam = CameraModel(
        fx=460.0, fy=460.0, cx=320.0, cy=240.0, width=640, height=480, body_t_cam=body_t_cam
    )
    laser_height = 0.8
    body_t_laser = Pose(np.eye(3), np.array([0.0, 0.0, laser_height - BODY_HEIGHT]))
    cam_t_laser = body_t_cam.inverse() @ body_t_laser
    return SensorRig(
        camera=cam,
        stereo_baseline=0.4,
        cam_t_laser=cam_t_laser,
        laser_height=laser_height,
    )


def default_world(seed: int = 7, car_sessions=(0, 1)) -> WorldModel:
    """The `yq-mini` scene: loop road, facades, poles, ground, two
    semi-static cars, one moving box and two feature bushes."""
    elems = []
    eid = 0

    def nid():
        nonlocal eid
        eid += 1
        return eid - 1

    # ground
    elems.append(
        PlanarPatch(
            nid(),
            np.array([-30.0, -18.0, 0.0]),
            np.array([60.0, 0.0, 0.0]),
            np.array([0.0, 36.0, 0.0]),
            feature_density=0.0,
            kind=KIND_GROUND,
        )
    )
    # facades along +/- y, facing the road
    wall_h = 4.0
    for y in (14.0, -14.0):
        for x0, x1 in ((-16.0, -6.0), (-4.0, 4.0), (6.0, 16.0)):
            elems.append(
                PlanarPatch(
                    nid(),
                    np.array([x0, y, 0.0]),
                    np.array([x1 - x0, 0.0, 0.0]),
                    np.array([0.0, 0.0, wall_h]),
                    feature_density=0.7,
                    kind=KIND_STATIC,
                )
            )
    # short stubs perpendicular to the facades (doorways, pillars) give
    # the along-road direction planar structure
    for y, into in ((14.0, -1.0), (-14.0, 1.0)):
        for x in (-10.0, 0.0, 10.0):
            elems.append(
                PlanarPatch(
                    nid(),
                    np.array([x, y, 0.0]),
                    np.array([0.0, 1.6 * into, 0.0]),
                    np.array([0.0, 0.0, 3.0]),
                    feature_density=1.5,
                    kind=KIND_STATIC,
                )
            )
    # end walls at +/- x
    for x in (26.0, -26.0):
        elems.append(
            PlanarPatch(
                nid(),
                np.array([x, -9.0, 0.0]),
                np.array([0.0, 18.0, 0.0]),
                np.array([0.0, 0.0, wall_h]),
                feature_density=0.7,
                kind=KIND_STATIC,
            )
        )
    # poles (trees, lamp posts) along both road sides
    for x in np.linspace(-18, 18, 9):
        for y in (11.2, -11.2):
            elems.append(
                Pole(
                    nid(),
                    np.array([x, y, 0.0]),
                    np.array([x, y, 3.5]),
                    radius=0.15,
                    feature_density=3.0,
                    kind=KIND_STATIC,
                )
            )
    # a few poles on the inner island
    for x, y in ((-10.0, 6.2), (0.0, -6.2), (10.0, 6.2), (0.0, 6.2), (-10.0, -6.2), (10.0, -6.2)):
        elems.append(
            Pole(
                nid(),
                np.array([x, y, 0.0]),
                np.array([x, y, 3.0]),
                radius=0.12,
                feature_density=3.0,
                kind=KIND_STATIC,
            )
        )
    # semi-static parked cars near the facades
    for cx, cy in ((-8.0, 12.1), (10.0, -12.1)):
        elems.append(
            Box(
                nid(),
                np.array([cx, cy, 0.7]),
                np.array([4.0, 1.8, 1.4]),
                feature_density=1.2,
                kind=KIND_SEMI_STATIC,
                sessions=tuple(car_sessions),
            )
        )
    # one moving box crossing the scene (laser only)
    elems.append(
        Box(
            nid(),
            np.array([0.0, -10.0, 0.5]),
            np.array([1.0, 1.0, 1.0]),
            feature_density=0.0,
            kind=KIND_DYNAMIC,
            motion_direction=np.array([1.0, 0.0, 0.0]),
            motion_amplitude=8.0,
            motion_period=15.0,
        )
    )
    # feature bushes near the road edges
    for bx, by in ((12.0, 8.8), (-12.0, -8.8), (-14.0, 8.8), (14.0, -8.8), (0.0, 8.8), (4.0, -8.8)):
        elems.append(
            ScatterCluster(
                nid(),
                np.array([bx, by, 0.5]),
                np.array([1.2, 1.2, 1.0]),
                count=25,
                feature_density=1.0,
                kind=KIND_STATIC,
            )
        )
    return WorldModel(elems, seed=seed)


def default_trajectory_spec(direction: str = "forward", speed: float = 2.0) -> TrajectorySpec:
    waypoints = _rounded_rectangle_waypoints(
        half_x=20.0, half_y=10.0, corner_radius=6.0, spacing=2.5, z=BODY_HEIGHT
    )
    return TrajectorySpec(waypoints=waypoints, speed=speed, direction=direction)
