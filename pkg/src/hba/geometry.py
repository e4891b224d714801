"""SE(3) / SO(3) primitives.

Twists are 6-vectors ordered ``(rotation, translation)``: ``v[:3]`` is the
axis-angle part in radians and ``v[3:]`` the translational part in meters.
This ordering is used by every module in the package (adjoints, Jacobians,
Hessian blocks and information matrices).

Most functions accept stacked inputs (leading batch dimensions) so that the
solvers can evaluate thousands of poses without Python loops.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleAtPi

SMALL_ANGLE = 1e-6
PI_MARGIN = 1e-6
REORTHO_PERIOD = 1000


def hat(v):
    """Skew-symmetric matrix of ``v`` (shape ``(..., 3)`` -> ``(..., 3, 3)``)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _angle(phi):
    return np.linalg.norm(phi, axis=-1)


def so3_exp(phi):
    """Rodrigues formula; second-order Taylor expansion below ``SMALL_ANGLE``."""
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    half = np.sin(th / 2.0) / th
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * half * half)
    K = hat(phi)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def so3_log(R):
    """Inverse of :func:`so3_exp`; raises :class:`AngleAtPi` near a half turn."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta >= np.pi - PI_MARGIN):
        raise AngleAtPi(f"rotation angle {float(np.max(theta)):.9f} too close to pi")
    small = theta < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / safe_s)
    return scale[..., None] * w


def so3_left_jacobian(phi):
    """``V(phi)`` such that the SE(3) exponential translation is ``V @ rho``."""
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    half = np.sin(th / 2.0) / th
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * half * half)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (th - np.sin(th)) / th**3)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    half = th / 2.0
    # (1 - (th/2) cot(th/2)) / th^2, series 1/12 + th^2/720
    c = np.where(small, 1.0 / 12.0 + theta**2 / 720.0,
                 (1.0 - half * np.cos(half) / np.sin(half)) / th**2)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + c[..., None, None] * (K @ K)


def se3_exp(v):
    """Twist ``(..., 6)`` -> ``(R (..., 3, 3), t (..., 3))``."""
    v = np.asarray(v, dtype=float)
    phi, rho = v[..., :3], v[..., 3:]
    R = so3_exp(phi)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return R, t


def se3_log(R, t):
    phi = so3_log(R)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), np.asarray(t, dtype=float))
    return np.concatenate([phi, rho], axis=-1)


def adjoint(R, t):
    """6x6 adjoint of ``(R, t)`` in ``(rotation, translation)`` ordering."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat(t) @ R
    return out


def _q_matrix(phi, rho):
    theta = _angle(phi)
    small = theta < 1e-2
    th = np.where(small, 1.0, theta)
    s, c = np.sin(th), np.cos(th)
    c1 = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (th - s) / th**3)
    c2 = np.where(small, -1.0 / 24.0 + theta**2 / 720.0, (1.0 - th**2 / 2.0 - c) / th**4)
    c3 = np.where(small, -1.0 / 120.0,
                  0.5 * ((1.0 - th**2 / 2.0 - c) / th**4 - 3.0 * (th - s - th**3 / 6.0) / th**5))
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    return (0.5 * Rh
            + c1[..., None, None] * (PR + RP + PRP)
            - c2[..., None, None] * (PP @ Rh + RP @ P - 3.0 * PRP)
            - c3[..., None, None] * (PRP @ P + PP @ Rh @ P))


def se3_left_jacobian(v):
    v = np.asarray(v, dtype=float)
    phi, rho = v[..., :3], v[..., 3:]
    J = so3_left_jacobian(phi)
    out = np.zeros(v.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _q_matrix(phi, rho)
    return out


def se3_right_jacobian(v):
    return se3_left_jacobian(-np.asarray(v, dtype=float))


def se3_right_jacobian_inv(v, small=1e-4):
    """Inverse right Jacobian; first-order ``I + ad(v)/2`` below ``small``."""
    v = np.asarray(v, dtype=float)
    out = np.empty(v.shape[:-1] + (6, 6))
    norm = np.linalg.norm(v, axis=-1)
    approx = norm < small
    if np.any(approx):
        out[approx] = np.eye(6) + 0.5 * ad(v[approx])
    if np.any(~approx):
        w = -v[~approx]
        J = so3_left_jacobian(w[..., :3])
        Ji = np.linalg.inv(J)
        Q = _q_matrix(w[..., :3], w[..., 3:])
        blk = np.zeros(w.shape[:-1] + (6, 6))
        blk[..., :3, :3] = Ji
        blk[..., 3:, 3:] = Ji
        blk[..., 3:, :3] = -Ji @ Q @ Ji
        out[~approx] = blk
    return out


def ad(v):
    """Small adjoint (Lie bracket matrix) of a twist."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (6, 6))
    P = hat(v[..., :3])
    out[..., :3, :3] = P
    out[..., 3:, 3:] = P
    out[..., 3:, :3] = hat(v[..., 3:])
    return out


def compose_arrays(Ra, ta, Rb, tb):
    R = Ra @ Rb
    t = np.einsum("...ij,...j->...i", Ra, tb) + ta
    return R, t


def inverse_arrays(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


def orthonormalize(R):
    """Closest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.ones(R.shape[:-1])
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


def sym_eig3(M):
    """Ascending eigenvalues and column eigenvectors of symmetric 3x3 matrices.

    Accepts stacked input ``(..., 3, 3)``; the input is symmetrized first.
    """
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    return np.linalg.eigh(M)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R @ x + t``.

    Instances are immutable; every operation returns a new pose. The rotation
    is re-projected onto SO(3) every ``REORTHO_PERIOD`` compositions so that
    long products stay orthonormal.
    """

    rotation: np.ndarray
    translation: np.ndarray
    chain: int = field(default=0, repr=False)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, v) -> "Pose":
        R, t = se3_exp(v)
        return cls(R, t)

    def log(self) -> np.ndarray:
        return se3_log(self.rotation, self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        R, t = compose_arrays(self.rotation, self.translation, other.rotation, other.translation)
        chain = max(self.chain, other.chain) + 1
        if chain >= REORTHO_PERIOD:
            R, chain = orthonormalize(R), 0
        return Pose(R, t, chain)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        R, t = inverse_arrays(self.rotation, self.translation)
        return Pose(R, t, self.chain)

    def relative(self, other: "Pose") -> "Pose":
        return self.inverse().compose(other)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def adjoint(self) -> np.ndarray:
        return adjoint(self.rotation, self.translation)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"Pose(rotvec={np.round(so3_log(self.rotation), 6)}, t={np.round(self.translation, 6)})"


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def relative(a: Pose, b: Pose) -> Pose:
    """``a^-1 * b``."""
    return a.relative(b)


def log_map(P: Pose) -> np.ndarray:
    return P.log()


def exp_map(v) -> Pose:
    return Pose.exp(v)


def stack_poses(poses):
    """List of :class:`Pose` -> ``(R (n, 3, 3), t (n, 3))`` arrays."""
    if len(poses) == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return (np.stack([p.rotation for p in poses]),
            np.stack([p.translation for p in poses]))


def unstack_poses(R, t):
    return [Pose(R[i], t[i]) for i in range(len(R))]


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
