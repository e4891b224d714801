"""Problem generators shared by the unit and acceptance tests."""
import numpy as np

from hba.ba import BaProblem
from hba.geometry import Pose
from hba.voxel import VoxelMap, group_moments


def random_pose(rng, rot=0.5, trans=1.0):
    return Pose.exp(np.concatenate([rng.normal(size=3) * rot, rng.normal(size=3) * trans]))


def random_voxel_problem(rng, n_frames, n_vox=20, noise=0.05, hessian="exact"):
    """Random plane-ish voxels seen by every frame, with perturbed window poses.

    Returns the problem and, per voxel, the raw local points of every frame so
    tests can recompute anything by brute force.
    """
    poses = [Pose.identity()] + [random_pose(rng, 0.2, 0.5) for _ in range(n_frames - 1)]
    raw = []
    v_ids, f_ids, pts = [], [], []
    for v in range(n_vox):
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        u = np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0])
        u /= np.linalg.norm(u)
        w = np.cross(normal, u)
        center = rng.normal(size=3) * 5
        per_frame = {}
        for f in range(n_frames):
            m = int(rng.integers(5, 30))
            a, b = rng.uniform(-1, 1, (2, m))
            world = center + np.outer(a, u) + np.outer(b, w) + np.outer(rng.normal(0, noise, m),
                                                                     normal)
            local = poses[f].inverse().apply(world)
            per_frame[f] = local
            v_ids.append(np.full(m, v))
            f_ids.append(np.full(m, f))
            pts.append(local)
        raw.append(per_frame)
    v_ids, f_ids, pts = np.concatenate(v_ids), np.concatenate(f_ids), np.concatenate(pts)
    pair = v_ids * n_frames + f_ids
    count, mean, cov = group_moments(pts, pair, n_vox * n_frames)
    ev, ef = np.divmod(np.arange(n_vox * n_frames), n_frames)
    keys = np.column_stack([np.arange(n_vox), np.zeros((n_vox, 3), dtype=np.int64)])
    vmap = VoxelMap(keys, list(range(n_frames)), np.zeros(n_frames + 1, dtype=np.int64),
                    np.zeros(0, dtype=np.int64), ev, ef, count, mean, cov, poses, 4.0)
    guess = [Pose.identity()] + [p @ random_pose(rng, 0.01, 0.02) for p in poses[1:]]
    return BaProblem(vmap, guess, hessian=hessian), raw


def global_points(problem, raw, v, poses=None):
    poses = problem.poses if poses is None else poses
    return np.vstack([poses[f].apply(p) for f, p in raw[v].items()])


def svd_plane_residual(points):
    """Mean squared distance to the best-fit plane, by SVD."""
    q = points - points.mean(axis=0)
    s = np.linalg.svd(q, compute_uv=False)
    return s[-1] ** 2 / len(points)


def perturbed_cost(problem, delta):
    from hba.ba import _right_update
    R, t = _right_update(problem.R, problem.t, delta)
    return problem.cost(R, t)


def fd_gradient(problem, h=1e-6):
    n = 6 * (problem.n_frames - 1)
    g = np.zeros(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        g[i] = (perturbed_cost(problem, e) - perturbed_cost(problem, -e)) / (2 * h)
    return g


def fd_hessian(problem, h=1e-6):
    from hba.ba import _right_update
    n = 6 * (problem.n_frames - 1)
    H = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        gp = problem.evaluate(*_right_update(problem.R, problem.t, e), hessian=False)[1]
        gm = problem.evaluate(*_right_update(problem.R, problem.t, -e), hessian=False)[1]
        H[:, i] = (gp - gm) / (2 * h)
    return 0.5 * (H + H.T)
