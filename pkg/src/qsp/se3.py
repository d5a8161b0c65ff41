"""Rigid transforms: rotations, SE(3) composition, exponential map, quaternions.

Rotation matrices are validated to 1e-9 orthonormality; quaternions follow
the Hamilton convention with w last (the TUM trajectory file layout).
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def rodrigues(omega):
    """Rotation matrix from an axis-angle vector (angle = |omega|)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    if theta < 1e-10:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise InvalidArgument("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidArgument("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self * other: apply `other` first, then `self`."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform (N, 3) points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return PoseSE3(m[:3, :3], m[:3, 3])


def exp_se3(xi) -> PoseSE3:
    """SE(3) exponential of (omega, rho): rotation omega, V(omega) @ rho."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    omega, rho = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    r = rodrigues(omega)
    if theta < 1e-10:
        v = np.eye(3) + 0.5 * k + (k @ k) / 6.0
    else:
        t2 = theta * theta
        v = (
            np.eye(3)
            + ((1.0 - np.cos(theta)) / t2) * k
            + ((theta - np.sin(theta)) / (t2 * theta)) * (k @ k)
        )
    # orthonormalise against accumulated rounding before validation
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return PoseSE3(r, v @ rho)


def rotation_angle_deg(r) -> float:
    """Geodesic rotation angle in degrees, arccos((tr - 1)/2) with the
    argument clamped to [-1, 1].

    Evaluated as atan2(sin, cos) from the antisymmetric part, which is the
    same quantity but returns an exact 0.0 for exactly-symmetric near-identity
    products such as R^T @ R.
    """
    r = np.asarray(r, dtype=np.float64)
    s = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_t = float(np.linalg.norm(s))
    cos_t = float(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0))
    return float(np.degrees(np.arctan2(sin_t, cos_t)))


def rot_to_quat(r) -> np.ndarray:
    """Rotation matrix -> Hamilton quaternion (qx, qy, qz, qw), qw >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            qw = (r[2, 1] - r[1, 2]) / s
            qx = 0.25 * s
            qy = (r[0, 1] + r[1, 0]) / s
            qz = (r[0, 2] + r[2, 0]) / s
        elif i == 1:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
            qw = (r[0, 2] - r[2, 0]) / s
            qx = (r[0, 1] + r[1, 0]) / s
            qy = 0.25 * s
            qz = (r[1, 2] + r[2, 1]) / s
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
            qw = (r[1, 0] - r[0, 1]) / s
            qx = (r[0, 2] + r[2, 0]) / s
            qy = (r[1, 2] + r[2, 1]) / s
            qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quat_to_rot(q) -> np.ndarray:
    """Hamilton quaternion (qx, qy, qz, qw) -> rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def euler_zyx_deg(r) -> tuple:
    """(roll, pitch, yaw) in degrees for R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    r = np.asarray(r, dtype=np.float64)
    pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    roll = np.arctan2(r[2, 1], r[2, 2])
    yaw = np.arctan2(r[1, 0], r[0, 0])
    return tuple(np.degrees([roll, pitch, yaw]))
