"""Adaptive voxelization into plane features.

Points of all frames are placed in a common global frame, bucketed into cubic
cells of size ``V`` anchored at the origin, and every cell whose scatter passes
the eigenvalue-ratio plane test is kept.  Failing cells are split into eight
children down to ``max_depth``; cells that never pass, or hold fewer than
``min_points`` points, are discarded.

The map keeps, for every ``(voxel, frame)`` pair, the point statistics in the
frame's *local* coordinates, so that the bundle adjustment can re-evaluate the
voxel under new poses without touching individual points.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import MissingPose
from .geometry import Pose, sym_eig3

DEGENERATE_SPREAD = 1e-12
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


@dataclass(frozen=True)
class VoxelKey:
    i: int
    j: int
    k: int
    depth: int = 0

    def cell_size(self, root_size: float) -> float:
        return root_size / 2**self.depth


@dataclass
class PointCluster:
    """Sufficient statistics ``(sum p, sum p p^T, count)`` of a point set."""

    sum: np.ndarray
    outer_sum: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls) -> "PointCluster":
        return cls(np.zeros(3), np.zeros((3, 3)), 0)

    @classmethod
    def from_points(cls, points) -> "PointCluster":
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(p.sum(axis=0), p.T @ p, len(p))

    def merge(self, other: "PointCluster") -> "PointCluster":
        return PointCluster(self.sum + other.sum, self.outer_sum + other.outer_sum,
                            self.count + other.count)

    __add__ = merge

    def transform(self, pose: Pose) -> "PointCluster":
        R, t = pose.rotation, pose.translation
        Rs = R @ self.sum
        outer = (R @ self.outer_sum @ R.T + np.outer(Rs, t) + np.outer(t, Rs)
                 + self.count * np.outer(t, t))
        return PointCluster(Rs + self.count * t, outer, self.count)

    def mean(self) -> np.ndarray:
        return self.sum / self.count

    def scatter(self) -> np.ndarray:
        c = self.mean()
        S = self.outer_sum / self.count - np.outer(c, c)
        return 0.5 * (S + S.T)


def plane_test(merged: PointCluster, theta: float) -> bool:
    """True iff ``lambda_min / lambda_max < theta`` for the cluster scatter."""
    if merged.count < 3:
        return False
    lam, _ = sym_eig3(merged.scatter())
    if lam[2] < DEGENERATE_SPREAD:
        return False
    return bool(lam[0] / lam[2] < theta)


def _plane_mask(lam, counts, theta, min_points):
    spread_ok = lam[:, 2] >= DEGENERATE_SPREAD
    ratio = np.where(spread_ok, lam[:, 0] / np.where(spread_ok, lam[:, 2], 1.0), np.inf)
    return (counts >= min_points) & spread_ok & (ratio < theta)


def group_moments(points, group, n_groups):
    """Count, mean and centered scatter (divided by count) per group id."""
    counts = np.bincount(group, minlength=n_groups).astype(float)
    safe = np.maximum(counts, 1.0)
    mean = np.stack([np.bincount(group, weights=points[:, a], minlength=n_groups)
                     for a in range(3)], axis=1) / safe[:, None]
    q = points - mean[group]
    cov = np.empty((n_groups, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            v = np.bincount(group, weights=q[:, a] * q[:, b], minlength=n_groups) / safe
            cov[:, a, b] = v
            cov[:, b, a] = v
    return counts, mean, cov


def _pack_keys(keys):
    k = keys + _KEY_OFFSET
    if np.any(k < 0) or np.any(k >= (1 << _KEY_BITS)):
        raise ValueError("voxel key out of range; use a larger voxel size")
    return (k[:, 0] << (2 * _KEY_BITS)) | (k[:, 1] << _KEY_BITS) | k[:, 2]


def _unpack_key(packed):
    mask = (1 << _KEY_BITS) - 1
    return (int((packed >> (2 * _KEY_BITS)) & mask) - _KEY_OFFSET,
            int((packed >> _KEY_BITS) & mask) - _KEY_OFFSET,
            int(packed & mask) - _KEY_OFFSET)


@dataclass
class PlaneVoxel:
    key: VoxelKey
    clusters: dict          # frame index -> PointCluster in that frame's local coordinates
    merged: PointCluster    # global coordinates, under the poses used to build the map
    point_indices: dict     # frame index -> indices into that frame's points


class VoxelMap(Sequence):
    """Retained plane voxels of one set of frames, stored as flat arrays.

    Indexing yields :class:`PlaneVoxel` views. The arrays used by the solver:

    ``entry_voxel``, ``entry_frame``  voxel id and frame *position* per entry
    ``entry_count``, ``entry_mean``, ``entry_cov``  local-frame moments
    ``point_voxel``  voxel id of every input point (``-1`` if not a plane point)
    """

    def __init__(self, keys, frame_indices, frame_offsets, point_voxel,
                 entry_voxel, entry_frame, entry_count, entry_mean, entry_cov,
                 global_poses, voxel_size):
        self.keys = keys
        self.frame_indices = list(frame_indices)
        self.frame_offsets = frame_offsets
        self.point_voxel = point_voxel
        self.entry_voxel = entry_voxel
        self.entry_frame = entry_frame
        self.entry_count = entry_count
        self.entry_mean = entry_mean
        self.entry_cov = entry_cov
        self.global_poses = list(global_poses)
        self.voxel_size = voxel_size

    def __len__(self):
        return len(self.keys)

    def __getitem__(self, v):
        if isinstance(v, slice):
            return [self[i] for i in range(*v.indices(len(self)))]
        if v < 0:
            v += len(self)
        if not 0 <= v < len(self):
            raise IndexError(v)
        sel = np.flatnonzero(self.entry_voxel == v)
        clusters, indices = {}, {}
        for e in sel:
            f = int(self.entry_frame[e])
            n = self.entry_count[e]
            m = self.entry_mean[e]
            clusters[self.frame_indices[f]] = PointCluster(
                n * m, n * (self.entry_cov[e] + np.outer(m, m)), int(n))
            lo, hi = self.frame_offsets[f], self.frame_offsets[f + 1]
            indices[self.frame_indices[f]] = np.flatnonzero(self.point_voxel[lo:hi] == v)
        poses = dict(zip(self.frame_indices, self.global_poses))
        key = VoxelKey(*map(int, self.keys[v]))
        return PlaneVoxel(key, clusters, merge_into_global_clusters(clusters, poses), indices)

    def plane_point_mask(self, position):
        """Boolean mask of plane points of the frame at list ``position``."""
        lo, hi = self.frame_offsets[position], self.frame_offsets[position + 1]
        return self.point_voxel[lo:hi] >= 0

    def frame_point_voxels(self, position):
        lo, hi = self.frame_offsets[position], self.frame_offsets[position + 1]
        return self.point_voxel[lo:hi]

    @property
    def total_points(self):
        return int(self.entry_count.sum())


def _group_ids(keys, dense_limit):
    """Lexicographically ordered unique rows of ``keys`` (int64, (n, 3)) and inverse ids.

    Uses a dense grid plus ``bincount`` when the bounding box is small enough,
    otherwise a sort; both give the same order.
    """
    if len(keys) == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    lo = keys.min(axis=0)
    span = keys.max(axis=0) - lo + 1
    size = int(np.prod(span))
    if size <= dense_limit:
        strides = np.array([span[1] * span[2], span[2], 1], dtype=np.int64)
        lin = (keys - lo) @ strides
        occupied = np.flatnonzero(np.bincount(lin, minlength=size))
        lut = np.full(size, -1, dtype=np.int64)
        lut[occupied] = np.arange(len(occupied))
        uniq = np.stack(np.unravel_index(occupied, tuple(span)), axis=1) + lo
        return uniq.astype(np.int64), lut[lin]
    packed, inv = np.unique(_pack_keys(keys), return_inverse=True)
    uniq = np.array([_unpack_key(p) for p in packed], dtype=np.int64).reshape(-1, 3)
    return uniq, inv.ravel()


def _pair_ids(a, b, nb, dense_limit):
    """Ids of distinct ``(a, b)`` pairs ordered by ``a`` then ``b``, plus inverse."""
    key = a * nb + b
    if len(key) and int(key.max()) < dense_limit:
        occupied = np.flatnonzero(np.bincount(key))
        lut = np.full(int(key.max()) + 1, -1, dtype=np.int64)
        lut[occupied] = np.arange(len(occupied))
        return occupied, lut[key]
    uk, inv = np.unique(key, return_inverse=True)
    return uk, inv.ravel()


def build_adaptive_map(frames, voxel_size, theta, min_points=20, max_depth=3, poses=None):
    """Adaptive plane voxel map of ``frames``.

    ``poses`` (global, one per frame) default to the frames' own poses.
    Output order is deterministic: voxels sorted by depth, then by key.

    Each depth makes one pass over the still-active points, collecting
    per ``(cell, frame)`` moments in local coordinates; the global scatter of
    a cell used by the plane test is assembled from those moments and the
    poses, so no second pass is needed for the retained entries.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be > 0")
    if poses is None:
        poses = [f.pose for f in frames]
    clouds = [np.asarray(f.points, dtype=float).reshape(-1, 3) for f in frames]
    sizes = np.array([len(c) for c in clouds], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_pts = int(offsets[-1])
    n_frames = max(len(frames), 1)
    local = np.concatenate(clouds) if n_pts else np.zeros((0, 3))
    frame_of = np.repeat(np.arange(len(frames)), sizes)
    glob = np.concatenate([p.apply(c) for p, c in zip(poses, clouds)]) if n_pts else local
    PR = np.stack([p.rotation for p in poses]) if len(poses) else np.zeros((0, 3, 3))
    Pt = np.stack([p.translation for p in poses]) if len(poses) else np.zeros((0, 3))
    dense_limit = max(4 * n_pts, 1 << 20)

    point_voxel = np.full(n_pts, -1, dtype=np.int64)
    keys_out = []
    ent = {"voxel": [], "frame": [], "count": [], "mean": [], "cov": []}
    active = np.arange(n_pts)
    n_vox = 0
    for depth in range(max_depth + 1):
        if len(active) == 0:
            break
        cell = voxel_size / 2**depth
        ijk = np.floor(glob[active] / cell).astype(np.int64)
        uniq, cell_of = _group_ids(ijk, dense_limit)
        n_cells = len(uniq)
        fr = frame_of[active]
        pair_key, pair_of = _pair_ids(cell_of, fr, n_frames, dense_limit)
        e_cell, e_frame = pair_key // n_frames, pair_key % n_frames
        e_count, e_mean, e_cov = group_moments(local[active], pair_of, len(pair_key))
        # entry moments -> global cell scatter
        R = PR[e_frame]
        g_mean = np.einsum("eij,ej->ei", R, e_mean) + Pt[e_frame]
        g_cov = R @ e_cov @ np.swapaxes(R, 1, 2)
        counts = np.bincount(e_cell, weights=e_count, minlength=n_cells)
        safe = np.maximum(counts, 1.0)
        mu = np.stack([np.bincount(e_cell, weights=e_count * g_mean[:, a], minlength=n_cells)
                       for a in range(3)], axis=1) / safe[:, None]
        d = g_mean - mu[e_cell]
        contrib = e_count[:, None, None] * (g_cov + d[:, :, None] * d[:, None, :])
        cov = np.zeros((n_cells, 3, 3))
        np.add.at(cov, e_cell, contrib)
        cov /= safe[:, None, None]
        lam = np.linalg.eigvalsh(0.5 * (cov + np.swapaxes(cov, 1, 2))) if n_cells else np.zeros((0, 3))
        keep = _plane_mask(lam, counts, theta, min_points)
        new_id = np.full(n_cells, -1, dtype=np.int64)
        new_id[keep] = n_vox + np.arange(int(keep.sum()))
        n_vox += int(keep.sum())
        for row in uniq[keep]:
            keys_out.append((int(row[0]), int(row[1]), int(row[2]), depth))
        point_voxel[active] = new_id[cell_of]
        sel = keep[e_cell]
        ent["voxel"].append(new_id[e_cell[sel]])
        ent["frame"].append(e_frame[sel])
        ent["count"].append(e_count[sel])
        ent["mean"].append(e_mean[sel])
        ent["cov"].append(e_cov[sel])
        split = (~keep) & (counts >= min_points)
        active = active[split[cell_of]]

    keys = np.array(keys_out, dtype=np.int64).reshape(-1, 4)
    if ent["voxel"]:
        cat = {k: np.concatenate(v) for k, v in ent.items()}
    else:
        cat = {"voxel": np.zeros(0, np.int64), "frame": np.zeros(0, np.int64),
               "count": np.zeros(0), "mean": np.zeros((0, 3)), "cov": np.zeros((0, 3, 3))}
    return VoxelMap(keys, [f.index for f in frames], offsets, point_voxel,
                    cat["voxel"].astype(np.int64), cat["frame"].astype(np.int64),
                    cat["count"], cat["mean"], cat["cov"], poses, voxel_size)


def merge_into_global_clusters(clusters, poses):
    out = PointCluster.empty()
    for idx in sorted(clusters):
        if idx not in poses:
            raise MissingPose(f"no pose for frame {idx}")
        out = out + clusters[idx].transform(poses[idx])
    return out


def merge_into_global(voxel: PlaneVoxel, poses) -> PointCluster:
    """Global-frame cluster of ``voxel`` under ``poses``.

    ``poses`` maps frame index -> :class:`Pose` (a list is indexed directly).
    """
    if not isinstance(poses, dict):
        poses = dict(enumerate(poses))
    return merge_into_global_clusters(voxel.clusters, poses)
