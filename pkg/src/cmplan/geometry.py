"""Rigid-transform helpers on 4x4 homogeneous matrices."""

import numpy as np

from .errors import ContractViolationError


def identity() -> np.ndarray:
    return np.eye(4)


def translation(x, y=None, z=None) -> np.ndarray:
    """Pure translation. Accepts a 3-vector or three scalars."""
    if y is None:
        t = np.asarray(x, dtype=float)
    else:
        t = np.array([x, y, z], dtype=float)
    T = np.eye(4)
    T[:3, 3] = t
    return T


def rotation(axis, angle: float) -> np.ndarray:
    """Rotation about a (not necessarily unit) 3-vector axis, Rodrigues form."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ContractViolationError("rotation axis must be nonzero")
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    T = np.eye(4)
    T[:3, :3] = R
    return T


def rot_x(angle: float) -> np.ndarray:
    return rotation([1.0, 0.0, 0.0], angle)


def rot_y(angle: float) -> np.ndarray:
    return rotation([0.0, 1.0, 0.0], angle)


def rot_z(angle: float) -> np.ndarray:
    return rotation([0.0, 0.0, 1.0], angle)


def transform(R: np.ndarray, t) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = np.asarray(t, dtype=float)
    return T


def inverse(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def apply(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply T to one point (3,) or a stack of points (n, 3)."""
    p = np.asarray(points, dtype=float)
    return p @ T[:3, :3].T + T[:3, 3]


def is_rigid(T: np.ndarray, tol: float = 1e-8) -> bool:
    """Rotation block orthonormal with determinant +1, bottom row (0,0,0,1)."""
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        return False
    R = T[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=tol):
        return False
    if not np.isclose(np.linalg.det(R), 1.0, atol=tol):
        return False
    return bool(np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=tol))


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in [0, pi]."""
    c = (np.trace(R[:3, :3]) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector (rotation vector) of a rotation matrix."""
    R = np.asarray(R, dtype=float)[:3, :3]
    angle = rotation_angle(R)
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # Near pi the off-diagonal construction degenerates; use the outer
        # product form R ~= 2 k k^T - I.
        A = (R + np.eye(3)) / 2.0
        k = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # Resolve signs from the largest component.
        i = int(np.argmax(k))
        if k[i] > 0:
            k[(i + 1) % 3] = A[i, (i + 1) % 3] / k[i]
            k[(i + 2) % 3] = A[i, (i + 2) % 3] / k[i]
        return angle * k / np.linalg.norm(k)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return angle / (2.0 * np.sin(angle)) * w


def euler_xyz_from_matrix(R: np.ndarray) -> np.ndarray:
    """Intrinsic XYZ Euler angles (roll, pitch, yaw) with R = Rx Ry Rz."""
    R = np.asarray(R, dtype=float)[:3, :3]
    sy = R[0, 2]
    pitch = np.arcsin(np.clip(sy, -1.0, 1.0))
    if abs(sy) < 1.0 - 1e-9:
        roll = np.arctan2(-R[1, 2], R[2, 2])
        yaw = np.arctan2(-R[0, 1], R[0, 0])
    else:
        # Gimbal lock: fold yaw into roll.
        roll = np.arctan2(R[2, 1], R[1, 1])
        yaw = 0.0
    return np.array([roll, pitch, yaw])


def matrix_from_euler_xyz(angles) -> np.ndarray:
    roll, pitch, yaw = np.asarray(angles, dtype=float)
    return (rot_x(roll) @ rot_y(pitch) @ rot_z(yaw))[:3, :3]


def pose_vector(T: np.ndarray) -> np.ndarray:
    """6-vector [x, y, z, roll, pitch, yaw] of a rigid transform."""
    t = T[:3, 3]
    rpy = euler_xyz_from_matrix(T[:3, :3])
    return np.concatenate([t, rpy])


def pose_matrix(vec) -> np.ndarray:
    """Inverse of pose_vector."""
    vec = np.asarray(vec, dtype=float)
    T = np.eye(4)
    T[:3, :3] = matrix_from_euler_xyz(vec[3:6])
    T[:3, 3] = vec[:3]
    return T
