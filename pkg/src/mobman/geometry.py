# Rigid-body pose algebra: unit quaternions (w, x, y, z), SE(3) poses, planar
# SE(2) poses, interpolation and the distances used by the state matcher.
#
# Conventions, used everywhere in this package:
#   - quaternions are (w, x, y, z) with the Hamilton product;
#   - stored quaternions are canonical: unit norm, w >= 0;
#   - angles are wrapped to (-pi, pi], with ties at pi mapped to +pi;
#   - a pose T_A_B maps coordinates from frame B to frame A.
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegeneratePitchError(ValueError):
    """Raised when a pose is too far from level to define a ground-plane yaw."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]; ties at pi map to +pi."""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Normalize and flip to the w >= 0 hemisphere.

    For w == 0 the sign of the first nonzero vector component decides, so
    canonicalization is deterministic and idempotent.
    """
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot canonicalize a zero or non-finite quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b (no normalization)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion."""
    qv = np.array([0.0, v[0], v[1], v[2]])
    return quat_mul(quat_mul(q, qv), quat_conj(q))[1:]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to canonical unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_canonical(q)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return quat_canonical(np.concatenate(([math.cos(h)], math.sin(h) * axis)))


def rot_z(angle: float) -> np.ndarray:
    return quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), angle)


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    """Spherical linear interpolation with hemisphere alignment of q1 to q0.

    A near-antipodal pair (dot < 1e-6 after alignment, i.e. rotations close to
    180 degrees apart, where the geodesic is not unique) falls back to
    normalized linear interpolation.
    """
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12 or dot < 1e-6:
        out = (1.0 - s) * q0 + s * q1
        n = np.linalg.norm(out)
        if n < 1e-12:
            return q0.copy()
        return out / n
    dot = min(dot, 1.0)
    omega = math.acos(dot)
    so = math.sin(omega)
    out = (math.sin((1.0 - s) * omega) / so) * q0 + (math.sin(s * omega) / so) * q1
    return out / np.linalg.norm(out)


def geodesic_so3(r0: np.ndarray, r1: np.ndarray) -> float:
    """Geodesic angle between two rotations, in [0, pi]."""
    dot = abs(float(np.dot(np.asarray(r0, dtype=float), np.asarray(r1, dtype=float))))
    dot = min(dot, 1.0)
    return 2.0 * math.acos(dot)


def quat_increment_apply(q_t: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Apply a rotation increment: q_{t+1} = dq * q_t, renormalized."""
    return quat_canonical(quat_mul(dq, q_t))


_IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class Pose3:
    """Rigid transform in SE(3): canonical unit quaternion + translation [m]."""

    rotation: np.ndarray = field(default_factory=lambda: _IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_canonical(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).copy())

    @staticmethod
    def identity() -> "Pose3":
        return Pose3()

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(
            quat_mul(self.rotation, other.rotation),
            self.translation + quat_rotate(self.rotation, other.translation),
        )

    def inverse(self) -> "Pose3":
        q_inv = quat_conj(self.rotation)
        return Pose3(q_inv, -quat_rotate(q_inv, self.translation))

    def apply(self, point: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, np.asarray(point, dtype=float)) + self.translation

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(self.rotation)
        M[:3, 3] = self.translation
        return M

    @staticmethod
    def from_matrix(M: np.ndarray) -> "Pose3":
        return Pose3(matrix_to_quat(M[:3, :3]), M[:3, 3])

    def to_list(self) -> list[float]:
        """Serialize as [px, py, pz, qw, qx, qy, qz]."""
        t, q = self.translation, self.rotation
        return [t[0], t[1], t[2], q[0], q[1], q[2], q[3]]

    @staticmethod
    def from_list(values) -> "Pose3":
        if len(values) != 7:
            raise ValueError(f"pose must have 7 values, got {len(values)}")
        v = [float(x) for x in values]
        return Pose3(np.array(v[3:7]), np.array(v[0:3]))


@dataclass(frozen=True)
class Pose2:
    """Planar pose: position [m] and heading wrapped to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @staticmethod
    def identity() -> "Pose2":
        return Pose2()

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.theta)

    def relative_to(self, reference: "Pose2") -> "Pose2":
        """Express this pose in the frame of `reference`."""
        return reference.inverse().compose(self)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.theta]

    @staticmethod
    def from_list(values) -> "Pose2":
        if len(values) != 3:
            raise ValueError(f"planar pose must have 3 values, got {len(values)}")
        return Pose2(float(values[0]), float(values[1]), float(values[2]))

    def lift(self, z: float = 0.0) -> Pose3:
        """Embed in SE(3) as a level pose at height z."""
        return Pose3(rot_z(self.theta), np.array([self.x, self.y, z]))


def dist_se2(a: Pose2, b: Pose2, fold_radius: float = 0.5) -> float:
    """Planar distance with the heading error folded in as an arc length.

    Default fold radius 0.5 m matches the base's turning radius used by the
    state matcher.
    """
    if fold_radius <= 0.0:
        raise ValueError("fold_radius must be positive")
    dth = wrap_angle(b.theta - a.theta)
    return math.sqrt((b.x - a.x) ** 2 + (b.y - a.y) ** 2 + (fold_radius * dth) ** 2)


def yaw_project(p: Pose3) -> Pose2:
    """Project a level-ish SE(3) pose to the ground plane.

    Yaw is the heading of the pose's forward (+x) axis projected onto the
    ground plane. Raises DegeneratePitchError when the forward axis is within
    1 degree of vertical (pitch beyond +-89 deg), where heading is undefined.
    """
    fwd = quat_rotate(p.rotation, np.array([1.0, 0.0, 0.0]))
    horiz = math.hypot(fwd[0], fwd[1])
    if horiz < math.cos(math.radians(89.0)):
        raise DegeneratePitchError("forward axis is near-vertical; yaw undefined")
    return Pose2(p.translation[0], p.translation[1], math.atan2(fwd[1], fwd[0]))
