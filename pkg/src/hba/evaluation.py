"""Trajectory error and map entropy metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateMap, LengthMismatch
from .geometry import Pose, so3_log, stack_poses

MIN_NEIGHBORS = 10


@dataclass
class AteResult:
    rot_rmse_deg: float
    trans_rmse_m: float
    rot_errors_deg: np.ndarray
    trans_errors_m: np.ndarray
    alignment: Pose

    def line(self):
        return f"rot_rmse_deg={self.rot_rmse_deg:.6f} trans_rmse_m={self.trans_rmse_m:.6f}"


def umeyama(src, dst):
    """Rigid ``(R, t)`` minimizing ``sum |R src_i + t - dst_i|^2`` (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def ate(estimate, ground_truth, align=True) -> AteResult:
    """Rotation (deg) and translation (m) RMSE after rigid alignment of positions."""
    if len(estimate) != len(ground_truth):
        raise LengthMismatch(f"estimate has {len(estimate)} poses, ground truth {len(ground_truth)}")
    if len(estimate) == 0:
        raise LengthMismatch("empty trajectories")
    Re, te = stack_poses(list(estimate))
    Rg, tg = stack_poses(list(ground_truth))
    if align and len(te) >= 3:
        R, t = umeyama(te, tg)
    elif align:
        # too few positions to fix the rotation: align the first poses instead
        A = Pose(Rg[0], tg[0]).compose(Pose(Re[0], te[0]).inverse())
        R, t = A.rotation, A.translation
    else:
        R, t = np.eye(3), np.zeros(3)
    Ra = R @ Re
    ta = te @ R.T + t
    trans = np.linalg.norm(ta - tg, axis=1)
    dR = np.swapaxes(Rg, 1, 2) @ Ra
    cos = np.clip((np.trace(dR, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    rot = np.degrees(np.arccos(cos))
    small = rot < 1e-3          # arccos loses precision near zero
    if np.any(small):
        rot[small] = np.degrees(np.linalg.norm(so3_log(dR[small]), axis=1))
    return AteResult(float(np.sqrt(np.mean(rot**2))), float(np.sqrt(np.mean(trans**2))),
                     rot, trans, Pose(R, t))


def mme(points, radius=0.5, min_neighbors=MIN_NEIGHBORS, stride=1):
    """Mean of ``0.5 ln det(2 pi e Sigma)`` over points with enough neighbours within ``radius``.

    ``stride > 1`` evaluates only every ``stride``-th point (neighbourhoods
    still use the full map).
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < min_neighbors:
        raise DegenerateMap(f"map has {len(pts)} points; need at least {min_neighbors}")
    tree = cKDTree(pts)
    query = pts[::stride]
    const = 2 * np.pi * np.e
    total, count = 0.0, 0
    for lo in range(0, len(query), 4096):
        nbrs = tree.query_ball_point(query[lo:lo + 4096], radius)
        sizes = np.array([len(n) for n in nbrs])
        ok = np.flatnonzero(sizes >= min_neighbors)
        if len(ok) == 0:
            continue
        idx = np.concatenate([nbrs[i] for i in ok])
        grp = np.repeat(np.arange(len(ok)), sizes[ok])
        cnt = sizes[ok].astype(float)
        p = pts[idx]
        mean = np.stack([np.bincount(grp, p[:, a]) for a in range(3)], axis=1) / cnt[:, None]
        q = p - mean[grp]
        cov = np.empty((len(ok), 3, 3))
        for a in range(3):
            for b in range(a, 3):
                cov[:, a, b] = cov[:, b, a] = np.bincount(grp, q[:, a] * q[:, b]) / cnt
        sign, logdet = np.linalg.slogdet(const * cov + 1e-12 * np.eye(3))
        total += float(np.sum(0.5 * logdet))
        count += len(ok)
    if count == 0:
        raise DegenerateMap(f"no point has {min_neighbors} neighbours within {radius} m")
    return total / count


def merged_map(frames, poses=None):
    """All points in global coordinates."""
    poses = poses if poses is not None else [f.pose for f in frames]
    return np.concatenate([p.apply(f.points) for f, p in zip(frames, poses)])
