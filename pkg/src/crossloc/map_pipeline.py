"""Offline construction of the stable localization map from multi-session data.

Stages, in order: per-session vision transformation (keep laser points that
project near visual features), sequential merge with observation counting,
static/dynamic classification by count, erosion and expansion post-filters,
ground extraction with voxel thinning, and the final union. The module also
provides the probabilistic association diagnostics (candidate posterior,
ground-truth association distribution, KL divergence, EM lower bound) used
to quantify how much a map edit improves data association.

Merge semantics (the documented rule all oracles follow): each session's
cloud is first thinned sequentially so no two kept points lie within the
newness radius; each base point's count increases at most once per session;
unmatched points join the base with count 1 after the session's pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .laser_map import FRAME_MAP, PointCloudMap, estimate_normals
from .liegroup import Pose
from .session import SessionData
from .trajectory import associate


class MissingPoseError(ValueError):
    def __init__(self, time: float):
        super().__init__(f"no ground-truth pose within 0.05 s of t={time:.6f}")
        self.time = time


class MismatchedSupportError(ValueError):
    """KLD of distributions over different candidate sets."""


@dataclass(frozen=True)
class MapFilterParams:
    """All knobs of the map pipeline, as absolute values."""

    pixel_gate: float = 3.0  # max pixel distance laser-to-feature
    newness_radius: float = 0.2  # merge radius d_alpha (m)
    static_threshold: int = 2  # min observation count beta
    erosion_radius: float = 0.3
    erosion_count: int = 3
    expansion_radius: float = 0.2
    expansion_count: int = 2
    likelihood_sigma: float = 0.1  # association likelihood stddev (m)
    gt_sigma: float = 0.05  # ground-truth association stddev (m)
    ground_band: float = 0.15  # half-width of the ground height slab (m)
    ground_voxel: float = 0.5

    def __post_init__(self):
        for name in (
            "pixel_gate",
            "newness_radius",
            "erosion_radius",
            "expansion_radius",
            "likelihood_sigma",
            "gt_sigma",
            "ground_band",
            "ground_voxel",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @staticmethod
    def for_sessions(n_sessions: int, **overrides) -> "MapFilterParams":
        """Defaults with count thresholds scaled to the session count."""
        params = MapFilterParams(
            static_threshold=math.ceil(0.5 * n_sessions),
            erosion_count=math.ceil(0.7 * n_sessions),
            expansion_count=math.ceil(0.6 * n_sessions),
        )
        return replace(params, **overrides) if overrides else params


def _gt_pose_at(session: SessionData, t: float) -> Pose:
    ia, ib = associate([t], session.gt_times, max_dt=0.05)
    if len(ia) == 0:
        raise MissingPoseError(t)
    return session.gt_poses[int(ib[0])]


# ---------------------------------------------------------------------------
# stage 1: vision transformation


def vision_transform_session(session: SessionData, params: MapFilterParams) -> PointCloudMap:
    """Keep laser points whose image projection lands near a visual feature.

    Scan points are projected into the (left) camera through the
    laser-to-camera extrinsic; points within ``pixel_gate`` of any feature
    pixel of the time-matched frame are transformed into the map frame via
    the ground-truth pose and accumulated (counts 1, labels carried).
    """
    rig = session.rig
    cam = rig.camera
    cam_t_laser = rig.cam_t_laser
    body_t_laser = rig.body_t_laser
    kept_pts, kept_labels = [], []
    for k, (points_f, labels) in enumerate(session.scans):
        if len(points_f) == 0:
            continue
        t_scan = float(session.gt_times[k]) if k < len(session.gt_times) else None
        if t_scan is None:
            break
        frame = session.frames[k]
        if len(frame.landmark_ids) == 0:
            continue
        p_cam = points_f @ cam_t_laser.rotation.T + cam_t_laser.translation
        in_front = p_cam[:, 2] > 1e-6
        if not in_front.any():
            continue
        uv = np.full((len(p_cam), 2), -1e9)
        zin = p_cam[in_front]
        uv[in_front] = np.stack(
            [cam.fx * zin[:, 0] / zin[:, 2] + cam.cx, cam.fy * zin[:, 1] / zin[:, 2] + cam.cy],
            axis=1,
        )
        valid = in_front & cam.in_image(uv)
        if not valid.any():
            continue
        feat_tree = cKDTree(frame.pixels[:, :2])
        dist, _ = feat_tree.query(uv[valid])
        close = dist <= params.pixel_gate
        if not np.any(close):
            continue
        keep_idx = np.nonzero(valid)[0][close]
        pose = _gt_pose_at(session, t_scan)
        world_t_laser = pose @ body_t_laser
        kept_pts.append(world_t_laser.apply(points_f[keep_idx]))
        kept_labels.append(labels[keep_idx])
    if not kept_pts:
        return PointCloudMap(np.zeros((0, 3)), frame=FRAME_MAP, labels=np.zeros(0, int))
    pts = np.concatenate(kept_pts)
    return PointCloudMap(pts, frame=FRAME_MAP, labels=np.concatenate(kept_labels))


# ---------------------------------------------------------------------------
# stage 2: merge with observation counting


def sequential_thin(points: np.ndarray, radius: float) -> np.ndarray:
    """Indices of a first-come thinning: drop points within radius of a keep."""
    kept: list[int] = []
    cells: dict[tuple, list[int]] = {}
    inv = 1.0 / radius
    r2 = radius * radius
    for i, p in enumerate(points):
        key = (int(math.floor(p[0] * inv)), int(math.floor(p[1] * inv)), int(math.floor(p[2] * inv)))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in cells.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        d = points[j] - p
                        if d @ d <= r2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            kept.append(i)
            cells.setdefault(key, []).append(i)
    return np.asarray(kept, dtype=int)


def merge_sessions(transformed: list[PointCloudMap], params: MapFilterParams) -> PointCloudMap:
    """Sequential merge: count re-observations, insert genuinely new points."""
    if not transformed:
        raise ValueError("need at least one session")
    base_pts: np.ndarray | None = None
    base_counts: np.ndarray | None = None
    base_labels: np.ndarray | None = None
    have_labels = all(c.labels is not None for c in transformed)
    for i, cloud in enumerate(transformed):
        keep = sequential_thin(cloud.positions, params.newness_radius)
        pts = cloud.positions[keep]
        labels = cloud.labels[keep] if have_labels else None
        if i == 0 or base_pts is None or len(base_pts) == 0:
            base_pts = pts.copy()
            base_counts = np.ones(len(pts), dtype=int)
            base_labels = labels.copy() if have_labels else None
            continue
        if len(pts) == 0:
            continue
        tree = cKDTree(base_pts)
        dist, idx = tree.query(pts)
        is_new = dist > params.newness_radius
        matched = np.unique(idx[~is_new])
        base_counts[matched] += 1
        if is_new.any():
            base_pts = np.concatenate([base_pts, pts[is_new]])
            base_counts = np.concatenate([base_counts, np.ones(int(is_new.sum()), dtype=int)])
            if have_labels:
                base_labels = np.concatenate([base_labels, labels[is_new]])
    return PointCloudMap(base_pts, counts=base_counts, frame=FRAME_MAP, labels=base_labels)


# ---------------------------------------------------------------------------
# stage 3: static classification with erosion/expansion


def classify_static(merged: PointCloudMap, params: MapFilterParams):
    """Partition by observation count: (static, dynamic)."""
    static_mask = merged.counts >= params.static_threshold
    return merged.subset(static_mask), merged.subset(~static_mask)


def concat_clouds(a: PointCloudMap, b: PointCloudMap) -> PointCloudMap:
    if a.frame != b.frame:
        raise ValueError("cannot concatenate clouds in different frames")
    labels = None
    if a.labels is not None and b.labels is not None:
        labels = np.concatenate([a.labels, b.labels])
    return PointCloudMap(
        np.concatenate([a.positions, b.positions]),
        np.concatenate([a.normals, b.normals]),
        np.concatenate([a.counts, b.counts]),
        np.concatenate([a.ground, b.ground]),
        a.frame,
        labels,
    )


def erode_static(static: PointCloudMap, dynamic: PointCloudMap, params: MapFilterParams):
    """Move low-count static points that hug the dynamic set into dynamic.

    Distances are taken against the dynamic set as it was on entry
    (simultaneous semantics), so the result is order-independent.
    """
    if len(static) == 0 or len(dynamic) == 0:
        return static, dynamic
    dist, _ = dynamic.tree.query(static.positions)
    move = (dist < params.erosion_radius) & (static.counts < params.erosion_count)
    return static.subset(~move), concat_clouds(dynamic, static.subset(move))


def expand_static(static: PointCloudMap, dynamic: PointCloudMap, params: MapFilterParams):
    """Recover high-count dynamic points adjacent to the static surface."""
    if len(static) == 0 or len(dynamic) == 0:
        return static, dynamic
    dist, _ = static.tree.query(dynamic.positions)
    move = (dist < params.expansion_radius) & (dynamic.counts > params.expansion_count)
    return concat_clouds(static, dynamic.subset(move)), dynamic.subset(~move)


# ---------------------------------------------------------------------------
# stage 4: ground modification


def voxel_centroids(points: np.ndarray, voxel: float):
    """One centroid per occupied voxel; cells ordered lexicographically.

    Returns (centroids, first_index) where first_index maps each centroid
    to the first input point of its cell.
    """
    if len(points) == 0:
        return points.reshape(0, 3), np.zeros(0, dtype=int)
    keys = np.floor(points / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, points)
    counts = np.bincount(inverse, minlength=len(uniq))
    first = np.full(len(uniq), len(points), dtype=int)
    np.minimum.at(first, inverse, np.arange(len(points)))
    return sums / counts[:, None], first


def extract_ground(sessions: list[SessionData], params: MapFilterParams) -> PointCloudMap:
    """Height-band ground points from every scan, merged and voxel-thinned."""
    pts_all, labels_all = [], []
    for session in sessions:
        rig = session.rig
        body_t_laser = rig.body_t_laser
        for k, (points_f, labels) in enumerate(session.scans):
            if len(points_f) == 0 or k >= len(session.gt_times):
                continue
            band = np.abs(points_f[:, 2] + rig.laser_height) <= params.ground_band
            if not band.any():
                continue
            pose = _gt_pose_at(session, float(session.gt_times[k]))
            world_t_laser = pose @ body_t_laser
            pts_all.append(world_t_laser.apply(points_f[band]))
            labels_all.append(labels[band])
    if not pts_all:
        return PointCloudMap(
            np.zeros((0, 3)), frame=FRAME_MAP, labels=np.zeros(0, int)
        )
    pts = np.concatenate(pts_all)
    labels = np.concatenate(labels_all)
    centroids, first = voxel_centroids(pts, params.ground_voxel)
    normals = np.tile([0.0, 0.0, 1.0], (len(centroids), 1))
    return PointCloudMap(
        centroids,
        normals,
        np.full(len(centroids), max(len(sessions), 1), dtype=int),
        np.ones(len(centroids), dtype=bool),
        FRAME_MAP,
        labels[first],
    )


def build_final_map(
    static: PointCloudMap, ground: PointCloudMap, normals_k: int = 10
) -> PointCloudMap:
    """Union of the static set (normals re-estimated) and the ground set.

    Ground normals stay forced to +z so ground association always takes the
    point-to-plane branch.
    """
    static_n = estimate_normals(static, normals_k) if len(static) else static
    if len(ground) == 0:
        return static_n
    return concat_clouds(static_n, ground)


def build_full_map(
    session: SessionData, voxel: float = 0.3, normals_k: int = 10
) -> PointCloudMap:
    """Unfiltered baseline: every laser return of one session, voxel-thinned."""
    pts_all, labels_all = [], []
    body_t_laser = session.rig.body_t_laser
    for k, (points_f, labels) in enumerate(session.scans):
        if len(points_f) == 0 or k >= len(session.gt_times):
            continue
        pose = _gt_pose_at(session, float(session.gt_times[k]))
        pts_all.append((pose @ body_t_laser).apply(points_f))
        labels_all.append(labels)
    pts = np.concatenate(pts_all)
    labels = np.concatenate(labels_all)
    centroids, first = voxel_centroids(pts, voxel)
    cloud = PointCloudMap(centroids, frame=FRAME_MAP, labels=labels[first])
    return estimate_normals(cloud, normals_k)


# ---------------------------------------------------------------------------
# association diagnostics (EM view of the localization likelihood)


def _gaussian_log_weights(p_query: np.ndarray, candidates: np.ndarray, sigma: float):
    d2 = np.sum((candidates - p_query) ** 2, axis=1)
    return -0.5 * d2 / (sigma * sigma)


def association_posterior(
    p_v: np.ndarray,
    cloud: PointCloudMap,
    transform: Pose,
    sigma: float,
    k: int = 20,
):
    """Posterior over the k nearest map candidates of a transformed point.

    ``transform`` maps the visual point into the map frame. Returns
    (candidate indices, probabilities); probabilities sum to one.
    """
    p_map = transform.apply(np.asarray(p_v, dtype=float))
    idx, _ = cloud.knn(p_map, k)
    logw = _gaussian_log_weights(p_map, cloud.positions[idx], sigma)
    logw -= logw.max()
    w = np.exp(logw)
    return idx, w / w.sum()


def association_gaussian(
    p_v: np.ndarray,
    cloud: PointCloudMap,
    transform: Pose,
    sigma: float,
    candidates: np.ndarray,
):
    """Normalized Gaussian weights over a fixed candidate set."""
    p_map = transform.apply(np.asarray(p_v, dtype=float))
    logw = _gaussian_log_weights(p_map, cloud.positions[candidates], sigma)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def association_kld(
    posterior: np.ndarray,
    gt_distribution: np.ndarray,
    candidates_posterior: np.ndarray | None = None,
    candidates_gt: np.ndarray | None = None,
    drop_eps: float = 1e-12,
) -> float:
    """KL(posterior || gt) over a shared candidate set.

    Candidates where both distributions fall below ``drop_eps`` are ignored;
    remaining zero-gt mass under positive posterior yields +inf.
    """
    p = np.asarray(posterior, dtype=float)
    g = np.asarray(gt_distribution, dtype=float)
    if p.shape != g.shape:
        raise MismatchedSupportError("distributions have different lengths")
    if candidates_posterior is not None and candidates_gt is not None:
        if not np.array_equal(candidates_posterior, candidates_gt):
            raise MismatchedSupportError("distributions over different candidates")
    keep = ~((p < drop_eps) & (g < drop_eps))
    p, g = p[keep], g[keep]
    if np.any((g <= 0.0) & (p > 0.0)):
        return float("inf")
    pos = p > 0.0
    return float(np.sum(p[pos] * np.log(p[pos] / g[pos])))


def association_log_likelihood(
    points: np.ndarray, cloud: PointCloudMap, transform: Pose, sigma: float, k: int = 20
) -> float:
    """Candidate-marginalized log likelihood with a uniform matching prior."""
    total = 0.0
    norm = -1.5 * math.log(2.0 * math.pi * sigma * sigma)
    for p_v in np.atleast_2d(points):
        p_map = transform.apply(p_v)
        idx, _ = cloud.knn(p_map, k)
        logw = _gaussian_log_weights(p_map, cloud.positions[idx], sigma) + norm
        logw = logw - math.log(len(idx))  # uniform prior over candidates
        m = logw.max()
        total += m + math.log(np.exp(logw - m).sum())
    return float(total)


def em_lower_bound(
    points: np.ndarray,
    cloud: PointCloudMap,
    transform: Pose,
    sigma: float,
    k: int = 20,
    q_distributions: list[np.ndarray] | None = None,
) -> float:
    """Jensen lower bound on the marginal log likelihood.

    With ``q_distributions`` omitted, the posterior is used and the bound is
    tight (equals the log likelihood).
    """
    total = 0.0
    norm = -1.5 * math.log(2.0 * math.pi * sigma * sigma)
    pts = np.atleast_2d(points)
    for i, p_v in enumerate(pts):
        p_map = transform.apply(p_v)
        idx, _ = cloud.knn(p_map, k)
        logw = _gaussian_log_weights(p_map, cloud.positions[idx], sigma) + norm
        log_joint = logw - math.log(len(idx))
        if q_distributions is None:
            m = logw.max()
            w = np.exp(logw - m)
            q = w / w.sum()
        else:
            q = np.asarray(q_distributions[i], dtype=float)
        pos = q > 0.0
        total += float(np.sum(q[pos] * (log_joint[pos] - np.log(q[pos]))))
    return float(total)


# ---------------------------------------------------------------------------
# pipeline driver


def run_map_pipeline(
    sessions: list[SessionData], params: MapFilterParams | None = None, normals_k: int = 10
):
    """All stages end to end; returns (final map, per-stage statistics).

    Statistics are (stage label, point count) rows, CSV-ready.
    """
    if params is None:
        params = MapFilterParams.for_sessions(len(sessions))
    stats = []
    transformed = []
    for session in sessions:
        cloud = vision_transform_session(session, params)
        transformed.append(cloud)
        stats.append((f"vision_transform_session_{session.session_id}", len(cloud)))
    merged = merge_sessions(transformed, params)
    stats.append(("merged", len(merged)))
    static, dynamic = classify_static(merged, params)
    stats.append(("classified_static", len(static)))
    stats.append(("classified_dynamic", len(dynamic)))
    static, dynamic = erode_static(static, dynamic, params)
    stats.append(("eroded_static", len(static)))
    static, dynamic = expand_static(static, dynamic, params)
    stats.append(("expanded_static", len(static)))
    ground = extract_ground(sessions, params)
    stats.append(("ground_voxels", len(ground)))
    final = build_final_map(static, ground, normals_k)
    stats.append(("final", len(final)))
    return final, stats
