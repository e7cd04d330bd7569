"""Rigid-body transforms, SO(3) exp/log and the two-block pose covariance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-6
_ORTHO_TOL = 1e-10


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """skew() for an (N, 3) array, returns (N, 3, 3)."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < _SMALL_ANGLE:
        # second-order series; error O(theta^3) < 1e-18
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos_theta = (np.trace(R) - 1.0) * 0.5
    sin_theta = 0.5 * float(np.linalg.norm(vee))
    theta = float(np.arctan2(sin_theta, cos_theta))
    if theta < _SMALL_ANGLE:
        return 0.5 * vee
    if cos_theta < -0.5:
        # antisymmetric part degenerates near pi; axis from the symmetric part
        # S = cos(theta) I + (1 - cos(theta)) a a^T
        A = (0.5 * (R + R.T) - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.sqrt(A[k, k])
        axis /= np.linalg.norm(axis)
        if axis @ vee < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * sin_theta) * vee


def so3_right_jacobian_inv(phi) -> np.ndarray:
    """Inverse right Jacobian of SO(3): log(exp(phi) exp(d)) ~ phi + Jr^-1 d."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    P = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * P + (P @ P) / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * P + c * (P @ P)


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation in Frobenius norm (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """T = (R, t) mapping points x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, w, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(so3_exp(w), t)

    @classmethod
    def from_quaternion(cls, q_xyzw, t) -> "Pose":
        return cls(quat_to_matrix(q_xyzw), t)

    @property
    def R(self) -> np.ndarray:
        return self.rotation

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return inverse(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self) -> str:
        rv = np.round(so3_log(self.rotation), 6)
        return f"Pose(rotvec={rv.tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """a * b: applies b first, then a."""
    R = a.rotation @ b.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
        R = orthonormalize(R)
    return Pose(R, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (x, y, z, w) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array(
            [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array(
            [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
        )
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def rotation_to_rpy(R) -> np.ndarray:
    """(roll, pitch, yaw) for R = Rz(yaw) Ry(pitch) Rx(roll)."""
    R = np.asarray(R, dtype=float)
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def rpy_to_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    Ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    Rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True, eq=False)
class PoseCovariance:
    """Separable rotation (left so(3) perturbation) / translation covariance."""

    rot_cov: np.ndarray
    trans_cov: np.ndarray

    def __post_init__(self):
        for name in ("rot_cov", "trans_cov"):
            m = _frozen(getattr(self, name)).reshape(3, 3)
            object.__setattr__(self, name, m)

    @classmethod
    def zero(cls) -> "PoseCovariance":
        return cls(np.zeros((3, 3)), np.zeros((3, 3)))

    @classmethod
    def from_full(cls, cov6) -> "PoseCovariance":
        cov6 = np.asarray(cov6, dtype=float)
        return cls(cov6[:3, :3], cov6[3:, 3:])

    def full(self) -> np.ndarray:
        out = np.zeros((6, 6))
        out[:3, :3] = self.rot_cov
        out[3:, 3:] = self.trans_cov
        return out

    def scaled(self, k: float) -> "PoseCovariance":
        return PoseCovariance(self.rot_cov * k, self.trans_cov * k)

    def is_zero(self) -> bool:
        return not (self.rot_cov.any() or self.trans_cov.any())


def invert_covariance6(pose: Pose, cov6: np.ndarray) -> np.ndarray:
    """First-order covariance of inverse(pose) under (left rot, additive trans) perturbations."""
    Rt = pose.rotation.T
    J = np.zeros((6, 6))
    J[:3, :3] = -Rt
    J[3:, :3] = -Rt @ skew(pose.translation)
    J[3:, 3:] = -Rt
    return J @ cov6 @ J.T


def compose_covariance6(a: Pose, cov_a: np.ndarray, b: Pose, cov_b: np.ndarray) -> np.ndarray:
    """Covariance of a * b with independent a, b (same perturbation model)."""
    Ja = np.eye(6)
    Ja[3:, :3] = -skew(a.rotation @ b.translation)
    Jb = np.zeros((6, 6))
    Jb[:3, :3] = a.rotation
    Jb[3:, 3:] = a.rotation
    return Ja @ cov_a @ Ja.T + Jb @ cov_b @ Jb.T
