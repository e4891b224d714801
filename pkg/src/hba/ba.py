"""Windowed LiDAR bundle adjustment on plane voxels.

The cost of a window is the sum over plane voxels of the smallest eigenvalue
of the voxel's point scatter, which equals the mean squared distance of the
voxel's points to their best-fit plane.  Everything is evaluated from per
``(voxel, frame)`` point statistics (count, local mean, local centered
scatter), so the cost of one evaluation does not depend on the number of
points.

Poses are perturbed on the right, ``T <- T Exp(xi)``, with twists ordered
``(rotation, translation)``.  Pose 0 of a window is the anchor and carries no
parameters.

For a voxel with unit eigenvectors ``u1, u2, u3`` of its scatter ``A`` and
per-point derivative ``dp``, the gradient of ``lambda1`` is
``(2/N) sum (u1.(p - c)) u1.dp`` and the exact Hessian is

    u1' A_ab u1 + 2 sum_m (u_m' A_a u1)(u_m' A_b u1) / (lambda1 - lambda_m)

Both reduce to closed forms in the per-entry statistics; the Gauss-Newton part
of the first term is used on its own when ``hessian="gn"``.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NoFeatures, NonFiniteCost, SingularHessian
from .geometry import Pose, adjoint, hat, se3_exp, stack_poses, unstack_poses
from .voxel import VoxelMap, build_adaptive_map

log = logging.getLogger(__name__)

EIGEN_GAP = 1e-10


@dataclass
class BaConfig:
    max_iter: int = 10
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_dn: float = 10.0
    grad_tol: float = 1e-7
    step_tol: float = 1e-8
    max_retries: int = 12
    hessian: str = "exact"          # "exact" | "gn"
    block_size: int | None = None   # keep only diagonal blocks of this many poses (reduced BA)


@dataclass
class VoxelConfig:
    voxel_size: float = 4.0
    theta: float = 0.05
    min_points: int = 20
    max_depth: int = 3


@dataclass
class WindowResult:
    """Outcome of one window solve.

    ``poses`` are relative to the window's first frame; ``hessian`` is the
    ``6(w-1)`` square Hessian at the solution with the anchor removed.
    ``information`` is the Hessian of the point-weighted cost (sum of squared
    point-to-plane distances) at the same solution; covariances come from it
    when present.
    """

    poses: list
    hessian: np.ndarray
    cost: float
    iterations: int
    initial_cost: float = float("nan")
    converged: bool = True
    frame_indices: list = field(default_factory=list)
    skipped_voxels: int = 0
    n_voxels: int = 0
    voxel_map: VoxelMap | None = field(default=None, repr=False)
    no_features: bool = False
    cost_history: list = field(default_factory=list, repr=False)
    t_voxel: float = 0.0
    t_ba: float = 0.0
    information: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self):
        return len(self.poses)


def _segment_starts(sorted_ids, n):
    starts = np.searchsorted(sorted_ids, np.arange(n))
    return starts


class BaProblem:
    """Voxel statistics of one window plus its current window-local poses."""

    def __init__(self, voxels: VoxelMap, poses, hessian="exact"):
        if len(voxels) == 0:
            raise NoFeatures("no plane voxels")
        self.voxels = voxels
        self.hessian_kind = hessian
        self.R, self.t = stack_poses(list(poses))
        self.n_frames = len(self.R)
        self.f = voxels.entry_frame
        self.v = voxels.entry_voxel
        self.n = voxels.entry_count
        self.m = voxels.entry_mean
        self.C = voxels.entry_cov
        self.n_vox = len(voxels)
        self.starts = _segment_starts(self.v, self.n_vox)
        self.N = np.add.reduceat(self.n, self.starts)
        self.skipped = np.zeros(0, dtype=np.int64)

    @property
    def poses(self):
        return unstack_poses(self.R, self.t)

    def set_arrays(self, R, t):
        self.R, self.t = R, t

    def _scatter(self, R, t):
        Re, te = R[self.f], t[self.f]
        mg = np.einsum("eij,ej->ei", Re, self.m) + te
        w = self.n[:, None]
        c = np.add.reduceat(w * mg, self.starts) / self.N[:, None]
        d = mg - c[self.v]
        rot_cov = Re @ self.C @ np.swapaxes(Re, 1, 2)
        contrib = self.n[:, None, None] * (rot_cov + d[:, :, None] * d[:, None, :])
        A = np.add.reduceat(contrib, self.starts) / self.N[:, None, None]
        A = 0.5 * (A + np.swapaxes(A, 1, 2))
        return A, Re, d

    def voxel_costs(self, R=None, t=None):
        R = self.R if R is None else R
        t = self.t if t is None else t
        A, _, _ = self._scatter(R, t)
        return np.linalg.eigvalsh(A)[:, 0]

    def cost(self, R=None, t=None):
        return float(np.sum(self.voxel_costs(R, t)))

    def evaluate(self, R=None, t=None, hessian=True, point_weighted=False):
        """Cost, gradient and Hessian over the non-anchor poses.

        With ``point_weighted`` each voxel's curvature is scaled by its point
        count, giving the Hessian of the summed squared distances instead of
        the per-voxel mean (cost and gradient are unaffected).
        """
        R = self.R if R is None else R
        t = self.t if t is None else t
        A, Re, d = self._scatter(R, t)
        lam, U = np.linalg.eigh(A)
        cost = float(np.sum(lam[:, 0]))

        gap_ok = (lam[:, 1] - lam[:, 0]) >= EIGEN_GAP * np.maximum(lam[:, 2], 0.0)
        self.skipped = np.flatnonzero(~gap_ok)
        use = gap_ok[self.v]
        v, f, n, m, C = self.v, self.f, self.n, self.m, self.C
        N = self.N[v]
        Rt = np.swapaxes(Re, 1, 2)
        W = np.einsum("eij,ej->ei", Rt, U[v, :, 0])
        beta = np.einsum("ei,ei->e", U[v, :, 0], d)
        CW = np.einsum("eij,ej->ei", C, W)
        mW = np.cross(m, W)

        scale = np.where(use, 2.0 * n / N, 0.0)
        g_e = np.concatenate([np.cross(CW + beta[:, None] * m, W), beta[:, None] * W], axis=1)
        g_e *= scale[:, None]
        F = self.n_frames
        grad = np.zeros((F, 6))
        np.add.at(grad, f, g_e)
        grad = grad[1:].ravel()
        if not hessian:
            return cost, grad, None

        Gv = np.concatenate([mW, W], axis=1)              # (A m + b)
        Wx = hat(W)
        D = np.zeros((len(v), 6, 6))
        D += Gv[:, :, None] * Gv[:, None, :]
        D[:, :3, :3] -= Wx @ C @ Wx
        D *= scale[:, None, None]

        cols = [n[:, None] * Gv]
        coefs = [np.where(use, -2.0 / N**2, 0.0)]
        if self.hessian_kind == "exact":
            z = n[:, None] * (CW + beta[:, None] * m)
            Wz = np.einsum("ei,ei->e", W, z)
            second = np.zeros((len(v), 6, 6))
            second[:, :3, :3] = (W[:, :, None] * z[:, None, :] + z[:, :, None] * W[:, None, :]
                                 - 2.0 * Wz[:, None, None] * np.eye(3)) / N[:, None, None]
            cross = (n * beta / N)[:, None, None] * Wx
            second[:, :3, 3:] = -cross
            second[:, 3:, :3] = cross
            D += np.where(use, 1.0, 0.0)[:, None, None] * second
            for k in (1, 2):
                Wk = np.einsum("eij,ej->ei", Rt, U[v, :, k])
                beta_k = np.einsum("ei,ei->e", U[v, :, k], d)
                CWk = np.einsum("eij,ej->ei", C, Wk)
                rot = (np.cross(CW, Wk) + beta[:, None] * np.cross(m, Wk)
                       + np.cross(CWk, W) + beta_k[:, None] * mW)
                trans = beta[:, None] * Wk + beta_k[:, None] * W
                cols.append((n / N)[:, None] * np.concatenate([rot, trans], axis=1))
                with np.errstate(divide="ignore"):
                    ck = 2.0 / (lam[:, 0] - lam[:, k])
                coefs.append(np.where(use, ck[v], 0.0))

        if point_weighted:
            D = D * N[:, None, None]
            coefs = [c * N for c in coefs]
        H = np.zeros((F, 6, F, 6))
        Hd = np.zeros((F, 6, 6))
        np.add.at(Hd, f, D)
        idx = np.arange(F)
        H[idx, :, idx, :] = Hd
        H = H.reshape(6 * F, 6 * F)
        n_rank = len(cols)
        S = np.zeros((F, 6, n_rank, self.n_vox))
        Cw = np.zeros((n_rank, self.n_vox))
        for r in range(n_rank):
            S[f, :, r, v] = cols[r]
            Cw[r, v] = coefs[r]
        S = S.reshape(6 * F, n_rank * self.n_vox)
        H += (S * Cw.ravel()) @ S.T
        H = H[6:, 6:]
        H = 0.5 * (H + H.T)
        return cost, grad, H


def ba_cost(problem: BaProblem) -> float:
    return problem.cost()


def ba_gradient_hessian(problem: BaProblem):
    _, g, H = problem.evaluate()
    return g, H


def _block_mask(n_free, block_size):
    """Mask keeping diagonal blocks of ``block_size`` poses (anchor counted in block 0)."""
    owner = (np.arange(1, n_free + 1) // block_size).repeat(6)
    return owner[:, None] == owner[None, :]


def _right_update(R, t, delta):
    dR, dt = se3_exp(delta.reshape(-1, 6))
    R_new = R.copy()
    t_new = t.copy()
    R_new[1:] = R[1:] @ dR
    t_new[1:] = np.einsum("eij,ej->ei", R[1:], dt) + t[1:]
    return R_new, t_new


def levenberg_marquardt(problem: BaProblem, config: BaConfig):
    """Minimize the window cost in place; returns ``(cost, H, iterations, converged, history)``."""
    R, t = problem.R.copy(), problem.t.copy()
    R[0], t[0] = np.eye(3), np.zeros(3)
    cost, g, H = problem.evaluate(R, t)
    if not np.isfinite(cost):
        raise NonFiniteCost(f"initial cost is {cost}")
    history = [cost]
    lam = config.lambda_init
    n_free = len(g)
    mask = _block_mask(n_free // 6, config.block_size) if config.block_size else None
    iterations, converged = 0, False
    if n_free == 0:
        return cost, H, 0, True, history
    while iterations < config.max_iter:
        if np.max(np.abs(g)) < config.grad_tol:
            converged = True
            break
        iterations += 1
        Hs = H * mask if mask is not None else H
        accepted = False
        small_step = False
        for _ in range(config.max_retries):
            try:
                delta = np.linalg.solve(Hs + lam * np.eye(n_free), -g)
            except np.linalg.LinAlgError:
                lam *= config.lambda_up
                continue
            if np.max(np.abs(delta)) < config.step_tol:
                small_step = True
                break
            R_new, t_new = _right_update(R, t, delta)
            new_cost = problem.cost(R_new, t_new)
            if np.isfinite(new_cost) and new_cost < cost:
                R, t, cost = R_new, t_new, new_cost
                lam = max(lam / config.lambda_dn, 1e-15)
                accepted = True
                break
            lam *= config.lambda_up
        if small_step:
            converged = True
            break
        if not accepted:
            break
        history.append(cost)
        cost, g, H = problem.evaluate(R, t)
    problem.set_arrays(R, t)
    if not converged and np.max(np.abs(g)) < config.grad_tol:
        converged = True
    return cost, H, iterations, converged, history


def solve_window(frames, initial_poses=None, ba_config=None, voxel_config=None,
                 keep_map=True) -> WindowResult:
    """Bundle-adjust ``frames`` (global ``initial_poses``) with the first frame anchored."""
    ba_config = ba_config or BaConfig()
    voxel_config = voxel_config or VoxelConfig()
    if len(frames) < 2:
        raise ValueError("solve_window needs at least 2 frames")
    if initial_poses is None:
        initial_poses = [f.pose for f in frames]
    t0 = time.perf_counter()
    vmap = build_adaptive_map(frames, voxel_config.voxel_size, voxel_config.theta,
                              voxel_config.min_points, voxel_config.max_depth,
                              poses=initial_poses)
    if len(vmap) == 0:
        raise NoFeatures(f"window starting at frame {frames[0].index}: no plane voxels")
    t1 = time.perf_counter()
    anchor_inv = initial_poses[0].inverse()
    rel = [Pose.identity()] + [anchor_inv.compose(p) for p in initial_poses[1:]]
    problem = BaProblem(vmap, rel, hessian=ba_config.hessian)
    initial_cost = problem.cost()
    cost, H, iterations, converged, history = levenberg_marquardt(problem, ba_config)
    if not np.isfinite(cost):
        raise NonFiniteCost(f"window starting at frame {frames[0].index}: cost {cost}")
    info = problem.evaluate(point_weighted=True)[2] if problem.n_frames > 1 else None
    return WindowResult(problem.poses, H, cost, iterations, initial_cost, converged,
                        [f.index for f in frames], len(problem.skipped), len(vmap),
                        vmap if keep_map else None, cost_history=history,
                        t_voxel=t1 - t0, t_ba=time.perf_counter() - t1, information=info)


def identity_window_result(frames, initial_poses=None) -> WindowResult:
    """Fallback for a window without features: initial relatives, identity information."""
    if initial_poses is None:
        initial_poses = [f.pose for f in frames]
    anchor_inv = initial_poses[0].inverse()
    rel = [Pose.identity()] + [anchor_inv.compose(p) for p in initial_poses[1:]]
    dim = 6 * (len(frames) - 1)
    return WindowResult(rel, np.eye(dim), 0.0, 0, 0.0, False, [f.index for f in frames],
                        no_features=True)


def _psd(H):
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    if w.min() >= 0:
        return H
    return (V * np.maximum(w, 0.0)) @ V.T


def _info_hessian(result):
    return result.hessian if result.information is None else result.information


def covariance(result: WindowResult):
    """``(H + eps I)^-1`` of the window, with ``eps = 1e-6 trace(H) / dim``."""
    H = _psd(_info_hessian(result))
    dim = H.shape[0]
    eps = 1e-6 * np.trace(H) / dim
    if not np.isfinite(eps) or eps <= 0:
        raise SingularHessian("Hessian has no positive curvature")
    return np.linalg.inv(H + eps * np.eye(dim))


def relative_pose_information(result: WindowResult, j: int, k: int | None = None, sigma=None):
    """Relative pose ``T_j^-1 T_{j+1}`` and its 6x6 information matrix.

    The covariance of the relative pose is propagated to first order from the
    window covariance; the anchor carries zero covariance.
    """
    k = j + 1 if k is None else k
    if not (0 <= j < k <= result.size - 1):
        raise IndexError(f"pair ({j}, {k}) outside window of {result.size}")
    Z = result.poses[j].relative(result.poses[k])
    if result.no_features:
        return Z, np.eye(6)
    try:
        if sigma is None:
            sigma = covariance(result)
        Jb = np.eye(6)
        sk = slice(6 * (k - 1), 6 * k)
        if j == 0:
            omega = sigma[sk, sk]
        else:
            sj = slice(6 * (j - 1), 6 * j)
            Zi = Z.inverse()
            Ja = -adjoint(Zi.rotation, Zi.translation)
            omega = (Ja @ sigma[sj, sj] @ Ja.T + Jb @ sigma[sk, sk] @ Jb.T
                     + Ja @ sigma[sj, sk] @ Jb.T + Jb @ sigma[sk, sj] @ Ja.T)
        omega = 0.5 * (omega + omega.T)
        eps = 1e-6 * np.trace(omega) / 6.0
        info = np.linalg.inv(omega + eps * np.eye(6))
        info = 0.5 * (info + info.T)
        if not np.all(np.isfinite(info)) or np.linalg.eigvalsh(info).min() <= 0:
            raise SingularHessian("information matrix not positive definite")
        return Z, info
    except (SingularHessian, np.linalg.LinAlgError) as exc:
        H = _info_hessian(result)
        kappa = np.trace(H) / H.shape[0] if H.size and np.trace(H) > 0 else 1.0
        warnings.warn(f"window {result.frame_indices[:1]}: {exc}; using {kappa:.3g} * I",
                      RuntimeWarning, stacklevel=2)
        return Z, kappa * np.eye(6)
