"""Prior laser map storage: spatial index, normals, consistency, file IO.

A PointCloudMap is an immutable array-of-structs cloud: positions, optional
unit normals (NaN rows mean "absent"), per-point observation counts, ground
flags, and an optional integer label channel used only as ground-truth
metadata by the simulator and tests (never serialized).

k-NN queries are exact: candidates come from a kd-tree, then distances are
recomputed in double precision and sorted by (distance, insertion index) so
results match a brute-force scan even under ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

FRAME_LOCAL = "local"
FRAME_MAP = "map"


class EmptyMapError(ValueError):
    """Query against a map with no points."""


class ParseError(ValueError):
    """Malformed map file; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class MapPoint:
    position: np.ndarray
    normal: np.ndarray | None = None
    observation_count: int = 0
    is_ground: bool = False

    def __post_init__(self):
        if self.normal is not None and abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("normal must be unit length")


class PointCloudMap:
    """Point cloud with per-point metadata and an exact spatial index."""

    def __init__(self, positions, normals=None, counts=None, ground=None, frame=FRAME_MAP, labels=None):
        positions = np.asarray(positions, dtype=float)
        if positions.size == 0:
            positions = positions.reshape(0, 3)
        self.positions = np.atleast_2d(positions)
        n = len(self.positions)
        if self.positions.shape != (n, 3):
            raise ValueError("positions must be (N, 3)")
        if normals is None:
            normals = np.full((n, 3), np.nan)
        self.normals = np.asarray(normals, dtype=float).reshape(n, 3)
        self.counts = (
            np.ones(n, dtype=int) if counts is None else np.asarray(counts, dtype=int).reshape(n)
        )
        self.ground = (
            np.zeros(n, dtype=bool) if ground is None else np.asarray(ground, dtype=bool).reshape(n)
        )
        if frame not in (FRAME_LOCAL, FRAME_MAP):
            raise ValueError(f"unknown frame tag {frame!r}")
        self.frame = frame
        self.labels = None if labels is None else np.asarray(labels, dtype=int).reshape(n)
        self._tree = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def has_normal(self) -> np.ndarray:
        return ~np.isnan(self.normals[:, 0])

    def point(self, i: int) -> MapPoint:
        normal = None if np.isnan(self.normals[i, 0]) else self.normals[i].copy()
        return MapPoint(self.positions[i].copy(), normal, int(self.counts[i]), bool(self.ground[i]))

    def subset(self, index) -> "PointCloudMap":
        index = np.asarray(index)
        return PointCloudMap(
            self.positions[index],
            self.normals[index],
            self.counts[index],
            self.ground[index],
            self.frame,
            None if self.labels is None else self.labels[index],
        )

    def knn(self, query, k: int):
        """Exact k nearest neighbors: (indices, distances), ascending.

        Ties are broken by insertion order; distances are recomputed with
        numpy so they are bit-identical to a brute-force scan.
        """
        n = len(self)
        if n == 0:
            raise EmptyMapError("knn on empty map")
        if k < 1:
            raise ValueError("k must be >= 1")
        query = np.asarray(query, dtype=float)
        kk = min(k, n)
        d_tree, _ = self.tree.query(query, k=kk)
        radius = float(np.max(np.atleast_1d(d_tree)))
        candidates = self.tree.query_ball_point(query, radius * (1.0 + 1e-9) + 1e-12)
        candidates = np.asarray(sorted(candidates), dtype=int)
        dists = np.linalg.norm(self.positions[candidates] - query, axis=1)
        order = np.lexsort((candidates, dists))[:kk]
        return candidates[order], dists[order]


def knn(cloud: PointCloudMap, query, k: int):
    """Module-level alias of PointCloudMap.knn."""
    return cloud.knn(query, k)


def _canonical_sign(normals: np.ndarray) -> np.ndarray:
    """Orient toward the +z hemisphere; ties toward +x, then +y."""
    out = normals.copy()
    tol = 1e-12
    nz, nx, ny = out[:, 2], out[:, 0], out[:, 1]
    flip = (nz < -tol) | ((np.abs(nz) <= tol) & (nx < -tol)) | (
        (np.abs(nz) <= tol) & (np.abs(nx) <= tol) & (ny < 0)
    )
    out[flip] *= -1.0
    return out


def estimate_normals(cloud: PointCloudMap, neighborhood_k: int = 10) -> PointCloudMap:
    """Per-point normals from the smallest covariance eigenvector.

    A normal is left absent when the neighborhood is degenerate: the
    smallest-to-middle eigenvalue ratio exceeds 0.5 (no dominant plane), or
    the middle eigenvalue itself vanishes (points on a line).
    """
    if neighborhood_k < 3:
        raise ValueError("neighborhood_k must be >= 3")
    n = len(cloud)
    if n == 0:
        return cloud
    kk = min(neighborhood_k, n)
    _, idx = cloud.tree.query(cloud.positions, k=kk)
    idx = np.atleast_2d(idx)
    if idx.shape[0] != n:  # kk == 1 collapses the axis
        idx = idx.reshape(n, -1)
    neigh = cloud.positions[idx]  # (n, kk, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    eigval, eigvec = np.linalg.eigh(cov)
    normals = eigvec[:, :, 0]
    scale = np.maximum(eigval[:, 2], 1e-300)
    mid_ok = eigval[:, 1] > 1e-9 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = eigval[:, 0] / eigval[:, 1]
    planar = mid_ok & (ratio <= 0.5) & (kk >= 3)
    normals = _canonical_sign(normals / np.linalg.norm(normals, axis=1, keepdims=True))
    normals[~planar] = np.nan
    return PointCloudMap(
        cloud.positions, normals, cloud.counts, cloud.ground, cloud.frame, cloud.labels
    )


def normal_consistency(normals, angle_threshold: float) -> bool:
    """True iff all normals are present and pairwise within the angle.

    ``normals`` is a sequence of (3,) vectors, possibly containing None or
    NaN entries (absent normals make the set inconsistent).
    """
    vecs = []
    for n in normals:
        if n is None:
            return False
        n = np.asarray(n, dtype=float)
        if np.any(np.isnan(n)):
            return False
        vecs.append(n)
    if len(vecs) < 2:
        raise ValueError("need at least two normals")
    m = np.stack(vecs)
    dots = np.clip(m @ m.T, -1.0, 1.0)
    return bool(np.all(np.arccos(dots) <= angle_threshold + 1e-12))


# ---------------------------------------------------------------------------
# file IO: `crossloc-map v1 <frame>` header, then one point per line


def save_map(cloud: PointCloudMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"crossloc-map v1 {cloud.frame}\n")
        has_n = cloud.has_normal()
        for i in range(len(cloud)):
            p = cloud.positions[i]
            if has_n[i]:
                nrm = cloud.normals[i]
                mid = f"{nrm[0]:.17g} {nrm[1]:.17g} {nrm[2]:.17g}"
            else:
                mid = "-"
            fh.write(
                f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {mid} "
                f"{int(cloud.counts[i])} {int(cloud.ground[i])}\n"
            )


def load_map(path) -> PointCloudMap:
    positions, normals, counts, ground = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 3 or parts[0] != "crossloc-map" or parts[1] != "v1":
            raise ParseError(1, f"bad header {header.strip()!r}")
        frame = parts[2]
        if frame not in (FRAME_LOCAL, FRAME_MAP):
            raise ParseError(1, f"unknown frame {frame!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            try:
                if len(tok) == 8:
                    normal = [float(tok[3]), float(tok[4]), float(tok[5])]
                    rest = tok[6:]
                elif len(tok) == 6 and tok[3] == "-":
                    normal = [np.nan] * 3
                    rest = tok[4:]
                elif len(tok) == 5:
                    normal = [np.nan] * 3
                    rest = tok[3:]
                else:
                    raise ValueError(f"expected 5, 6 or 8 fields, got {len(tok)}")
                positions.append([float(tok[0]), float(tok[1]), float(tok[2])])
                normals.append(normal)
                counts.append(int(rest[0]))
                ground.append(bool(int(rest[1])))
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
    if not positions:
        return PointCloudMap(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int), np.zeros(0, bool), frame)
    return PointCloudMap(np.array(positions), np.array(normals), np.array(counts), np.array(ground), frame)
