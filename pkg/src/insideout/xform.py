"""Rigid-body algebra on SE(3).

Rotations are stored as unit quaternions in (w, x, y, z) order and translations in
millimetres. Every constructor and operation renormalizes the quaternion, so long
composition chains do not drift off the unit sphere.
"""

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

DEGENERATE_ANGLE = 1e-9


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b of (w, x, y, z) quaternions."""
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


def quaternion_conjugate(q: np.ndarray) -> np.ndarray:
    """Conjugate (inverse for unit quaternions)."""
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _to_scipy(q: np.ndarray) -> Rotation:
    return Rotation.from_quat([q[1], q[2], q[3], q[0]])


def _from_scipy(r: Rotation) -> np.ndarray:
    x, y, z, w = r.as_quat()
    return np.array([w, x, y, z])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) pose: maps a point p to R(rotation) p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", _frozen(normalize_quaternion(q)))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, rotation: Rotation, translation: Iterable[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(_from_scipy(rotation), np.asarray(translation, dtype=float))

    @classmethod
    def from_rotvec(cls, rotvec: Iterable[float], translation: Iterable[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rotation(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)), translation)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix (rotation block is re-orthonormalized)."""
        m = np.asarray(matrix, dtype=float)
        return cls.from_rotation(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_record(cls, record: Iterable[float]) -> "RigidTransform":
        """Build from (tx, ty, tz, qw, qx, qy, qz)."""
        r = np.asarray(list(record), dtype=float)
        return cls(r[3:7], r[0:3])

    def to_record(self) -> np.ndarray:
        """Flatten to (tx, ty, tz, qw, qx, qy, qz)."""
        return np.concatenate([self.translation, self.rotation])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return _to_scipy(self.rotation).as_matrix()

    def as_rotation(self) -> Rotation:
        return _to_scipy(self.rotation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a point (3,) or points (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation_matrix.T + self.translation

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True)
class AxisAngle:
    """Rotation axis (unit vector) and angle in [0, pi]."""

    axis: np.ndarray
    angle: float


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a ∘ b: map a point through b, then through a."""
    q = quaternion_multiply(a.rotation, b.rotation)
    t = a.rotation_matrix @ b.translation + a.translation
    return RigidTransform(q, t)


def invert(t: RigidTransform) -> RigidTransform:
    q = quaternion_conjugate(t.rotation)
    r_inv = t.rotation_matrix.T
    return RigidTransform(q, -(r_inv @ t.translation))


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle in [0, pi] of the relative rotation r1^-1 r2."""
    rel = quaternion_multiply(quaternion_conjugate(np.asarray(r1, dtype=float)), np.asarray(r2, dtype=float))
    return float(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0])))


def to_axis_angle(r: np.ndarray) -> AxisAngle:
    """Axis-angle of a unit quaternion; axis is (1, 0, 0) for near-identity rotations."""
    q = normalize_quaternion(r)
    if q[0] < 0:
        q = -q
    vec_norm = float(np.linalg.norm(q[1:]))
    angle = float(2.0 * np.arctan2(vec_norm, q[0]))
    if angle <= DEGENERATE_ANGLE:
        return AxisAngle(axis=np.array([1.0, 0.0, 0.0]), angle=angle)
    return AxisAngle(axis=q[1:] / vec_norm, angle=angle)


def interpolate(a: RigidTransform, b: RigidTransform, alpha: float) -> RigidTransform:
    """Slerp on rotation (shortest arc), lerp on translation."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return a
    if alpha == 1.0:
        return b
    slerp = Slerp([0.0, 1.0], Rotation.concatenate([a.as_rotation(), b.as_rotation()]))
    rotation = slerp([alpha])[0]
    translation = (1.0 - alpha) * a.translation + alpha * b.translation
    return RigidTransform.from_rotation(rotation, translation)


def rotation_angle(t: RigidTransform) -> float:
    """Rotation angle of a transform in [0, pi]."""
    return geodesic_angle(np.array([1.0, 0.0, 0.0, 0.0]), t.rotation)


def exp_update(delta: np.ndarray) -> RigidTransform:
    """Retraction used by the pose solvers: delta = (rho, phi) -> (R(phi), rho)."""
    delta = np.asarray(delta, dtype=float)
    return RigidTransform.from_rotvec(delta[3:6], delta[0:3])


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
