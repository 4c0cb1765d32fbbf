"""Recorded traversal data: sensor rig description and session directory IO.

A session directory holds:

    imu.txt          one IMU sample per line: t wx wy wz ax ay az
    frames/NNNN.obs  per-frame stereo observations: lm_id ul vl ur vr
    scans/NNNN.txt   per-frame laser points in the sensor frame: x y z label
    gt.txt           ground-truth body trajectory: t tx ty tz qx qy qz qw
    rig.cfg          flat key = value description of the sensor rig
    labels.txt       optional element-id sidecar: id kind [session ids...]

Frame k's timestamp is row k of gt.txt; scans share the frame clock.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .imu import ImuNoiseModel, ImuSample, load_imu_stream, save_imu_stream
from .liegroup import Pose, quat_from_rotation, rotation_from_quat
from .residuals import CameraModel
from .trajectory import load_trajectory, save_trajectory


@dataclass(frozen=True)
class LaserModel:
    channels: int = 8
    elevation_min_deg: float = -16.0
    elevation_max_deg: float = 8.0
    azimuth_step_deg: float = 3.0
    max_range: float = 40.0
    range_noise: float = 0.02


@dataclass(frozen=True)
class SensorRig:
    """Cameras, IMU and laser with their body-frame extrinsics."""

    camera: CameraModel
    stereo_baseline: float = 0.4
    imu_noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    laser: LaserModel = field(default_factory=LaserModel)
    cam_t_laser: Pose = field(default_factory=Pose.identity)  # laser -> camera
    laser_height: float = 0.8
    imu_rate: float = 200.0
    frame_rate: float = 10.0
    gravity: float = 9.81

    @property
    def body_t_cam(self) -> Pose:
        return self.camera.body_t_cam

    @property
    def body_t_laser(self) -> Pose:
        return self.camera.body_t_cam @ self.cam_t_laser

    def right_camera(self) -> CameraModel:
        """Right stereo camera: left shifted along the camera x-axis."""
        offset = Pose(np.eye(3), np.array([self.stereo_baseline, 0.0, 0.0]))
        cam = self.camera
        return CameraModel(
            cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
            body_t_cam=cam.body_t_cam @ offset,
        )

    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])


@dataclass
class FrameObservations:
    """Stereo feature observations of one frame: ids plus (ul vl ur vr)."""

    landmark_ids: np.ndarray
    pixels: np.ndarray  # (n, 4)


@dataclass
class SessionData:
    session_id: int
    rig: SensorRig
    gt_times: np.ndarray
    gt_poses: list
    imu_samples: list
    frames: list  # list[FrameObservations]
    scans: list  # list of (points (n,3) in laser frame, labels (n,))
    element_kinds: dict | None = None  # id -> (kind, sessions tuple or None)


def _pose_to_row(pose: Pose) -> str:
    t = pose.translation
    q = quat_from_rotation(pose.rotation)
    return " ".join(f"{v:.17g}" for v in (*t, *q))


def _pose_from_row(vals) -> Pose:
    vals = [float(v) for v in vals]
    return Pose(rotation_from_quat(np.array(vals[3:7])), np.array(vals[0:3]))


def save_rig(path, rig: SensorRig) -> None:
    cam = rig.camera
    lines = {
        "cam_fx": cam.fx,
        "cam_fy": cam.fy,
        "cam_cx": cam.cx,
        "cam_cy": cam.cy,
        "cam_width": cam.width,
        "cam_height": cam.height,
        "stereo_baseline": rig.stereo_baseline,
        "body_t_cam": _pose_to_row(cam.body_t_cam),
        "cam_t_laser": _pose_to_row(rig.cam_t_laser),
        "laser_channels": rig.laser.channels,
        "laser_elevation_min_deg": rig.laser.elevation_min_deg,
        "laser_elevation_max_deg": rig.laser.elevation_max_deg,
        "laser_azimuth_step_deg": rig.laser.azimuth_step_deg,
        "laser_max_range": rig.laser.max_range,
        "laser_range_noise": rig.laser.range_noise,
        "laser_height": rig.laser_height,
        "gyro_noise_density": rig.imu_noise.gyro_noise_density,
        "accel_noise_density": rig.imu_noise.accel_noise_density,
        "gyro_bias_walk": rig.imu_noise.gyro_bias_walk,
        "accel_bias_walk": rig.imu_noise.accel_bias_walk,
        "imu_rate": rig.imu_rate,
        "frame_rate": rig.frame_rate,
        "gravity": rig.gravity,
    }
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in lines.items():
            fh.write(f"{key} = {value}\n")


def load_rig(path) -> SensorRig:
    raw = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
    cam = CameraModel(
        fx=float(raw["cam_fx"]),
        fy=float(raw["cam_fy"]),
        cx=float(raw["cam_cx"]),
        cy=float(raw["cam_cy"]),
        width=int(raw["cam_width"]),
        height=int(raw["cam_height"]),
        body_t_cam=_pose_from_row(raw["body_t_cam"].split()),
    )
    return SensorRig(
        camera=cam,
        stereo_baseline=float(raw["stereo_baseline"]),
        imu_noise=ImuNoiseModel(
            gyro_noise_density=float(raw["gyro_noise_density"]),
            accel_noise_density=float(raw["accel_noise_density"]),
            gyro_bias_walk=float(raw["gyro_bias_walk"]),
            accel_bias_walk=float(raw["accel_bias_walk"]),
        ),
        laser=LaserModel(
            channels=int(raw["laser_channels"]),
            elevation_min_deg=float(raw["laser_elevation_min_deg"]),
            elevation_max_deg=float(raw["laser_elevation_max_deg"]),
            azimuth_step_deg=float(raw["laser_azimuth_step_deg"]),
            max_range=float(raw["laser_max_range"]),
            range_noise=float(raw["laser_range_noise"]),
        ),
        cam_t_laser=_pose_from_row(raw["cam_t_laser"].split()),
        laser_height=float(raw["laser_height"]),
        imu_rate=float(raw["imu_rate"]),
        frame_rate=float(raw["frame_rate"]),
        gravity=float(raw["gravity"]),
    )


def save_session(directory, session: SessionData) -> None:
    directory = str(directory)
    os.makedirs(os.path.join(directory, "frames"), exist_ok=True)
    os.makedirs(os.path.join(directory, "scans"), exist_ok=True)
    save_rig(os.path.join(directory, "rig.cfg"), session.rig)
    save_imu_stream(os.path.join(directory, "imu.txt"), session.imu_samples)
    save_trajectory(os.path.join(directory, "gt.txt"), session.gt_times, session.gt_poses)
    for k, frame in enumerate(session.frames):
        with open(os.path.join(directory, "frames", f"{k:04d}.obs"), "w", encoding="utf-8") as fh:
            for lm_id, px in zip(frame.landmark_ids, frame.pixels):
                fh.write(
                    f"{int(lm_id)} {px[0]:.17g} {px[1]:.17g} {px[2]:.17g} {px[3]:.17g}\n"
                )
    for k, (points, labels) in enumerate(session.scans):
        with open(os.path.join(directory, "scans", f"{k:04d}.txt"), "w", encoding="utf-8") as fh:
            for p, lab in zip(points, labels):
                fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {int(lab)}\n")
    if session.element_kinds is not None:
        with open(os.path.join(directory, "labels.txt"), "w", encoding="utf-8") as fh:
            for elem_id in sorted(session.element_kinds):
                kind, sessions = session.element_kinds[elem_id]
                tail = "" if sessions is None else " " + " ".join(str(s) for s in sessions)
                fh.write(f"{elem_id} {kind}{tail}\n")


def load_session(directory, session_id: int = 0) -> SessionData:
    directory = str(directory)
    rig = load_rig(os.path.join(directory, "rig.cfg"))
    imu_samples = load_imu_stream(os.path.join(directory, "imu.txt"))
    gt_times, gt_poses = load_trajectory(os.path.join(directory, "gt.txt"))

    frames = []
    frame_dir = os.path.join(directory, "frames")
    for name in sorted(os.listdir(frame_dir)):
        ids, pixels = [], []
        with open(os.path.join(frame_dir, name), "r", encoding="utf-8") as fh:
            for line in fh:
                tok = line.split()
                if not tok:
                    continue
                ids.append(int(tok[0]))
                pixels.append([float(v) for v in tok[1:5]])
        frames.append(
            FrameObservations(
                np.asarray(ids, dtype=int),
                np.asarray(pixels, dtype=float).reshape(len(ids), 4),
            )
        )

    scans = []
    scan_dir = os.path.join(directory, "scans")
    for name in sorted(os.listdir(scan_dir)):
        data = np.loadtxt(os.path.join(scan_dir, name), ndmin=2)
        if data.size == 0:
            scans.append((np.zeros((0, 3)), np.zeros(0, dtype=int)))
        else:
            scans.append((data[:, :3], data[:, 3].astype(int)))

    element_kinds = None
    labels_path = os.path.join(directory, "labels.txt")
    if os.path.exists(labels_path):
        element_kinds = {}
        with open(labels_path, "r", encoding="utf-8") as fh:
            for line in fh:
                tok = line.split()
                if not tok:
                    continue
                sessions = tuple(int(s) for s in tok[2:]) if len(tok) > 2 else None
                element_kinds[int(tok[0])] = (tok[1], sessions)

    return SessionData(
        session_id=session_id,
        rig=rig,
        gt_times=gt_times,
        gt_poses=gt_poses,
        imu_samples=imu_samples,
        frames=frames,
        scans=scans,
        element_kinds=element_kinds,
    )
