"""Offline calibration solvers: Tsai-Lenz hand-eye and point-based rigid registration."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from insideout.models.errors import ErrorCode, InsideOutError
from insideout.xform import RigidTransform, compose, geodesic_angle, invert, rotation_angle, skew, to_axis_angle

logger = logging.getLogger(__name__)

DEFAULT_MIN_ROTATION_DEG = 5.0
PARALLEL_AXIS_RATIO = 1e-3


@dataclass(frozen=True)
class MotionPair:
    """Relative robot motion ``a`` and the matching sensor motion ``b`` (A X = X B)."""

    a: RigidTransform
    b: RigidTransform


@dataclass(frozen=True)
class PointCorrespondence:
    """Point ``p`` in frame P paired with point ``q`` in frame Q (mm)."""

    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class HandEyeResult:
    transform: RigidTransform
    rotation_residual_deg: float
    translation_residual_mm: float
    pairs_used: int
    pairs_discarded: int = 0


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    fre_mm: float
    residuals_mm: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def motion_pairs_eye_on_hand(
    robot_poses: Sequence[RigidTransform], sensor_poses: Sequence[RigidTransform]
) -> list[MotionPair]:
    """Consecutive motions for a sensor carried by the robot.

    Args:
        robot_poses: End-effector poses in the robot base frame.
        sensor_poses: Sensor poses in a frame fixed in the world (e.g. a calibration target).

    Returns:
        Pairs with A = E_i^-1 E_{i+1} and B = C_i^-1 C_{i+1}.
    """
    _check_equal_length(robot_poses, sensor_poses)
    return [
        MotionPair(
            a=compose(invert(robot_poses[i]), robot_poses[i + 1]),
            b=compose(invert(sensor_poses[i]), sensor_poses[i + 1]),
        )
        for i in range(len(robot_poses) - 1)
    ]


def motion_pairs_eye_on_base(
    robot_poses: Sequence[RigidTransform], tracker_poses: Sequence[RigidTransform]
) -> list[MotionPair]:
    """Consecutive motions for a stationary tracker observing a marker on the robot.

    Args:
        robot_poses: End-effector poses in the robot base frame.
        tracker_poses: Marker poses in the tracker frame.

    Returns:
        Pairs with A = E_{i+1} E_i^-1 and B = O_{i+1} O_i^-1, so that X is the tracker
        pose in the robot base frame.
    """
    _check_equal_length(robot_poses, tracker_poses)
    return [
        MotionPair(
            a=compose(robot_poses[i + 1], invert(robot_poses[i])),
            b=compose(tracker_poses[i + 1], invert(tracker_poses[i])),
        )
        for i in range(len(robot_poses) - 1)
    ]


def _check_equal_length(a: Sequence[object], b: Sequence[object]) -> None:
    if len(a) != len(b):
        raise InsideOutError(
            code=ErrorCode.LENGTH_MISMATCH,
            message=f"Pose lists differ in length ({len(a)} vs {len(b)})",
        )


def _modified_rodrigues(t: RigidTransform) -> np.ndarray:
    aa = to_axis_angle(t.rotation)
    return 2.0 * np.sin(aa.angle / 2.0) * aa.axis


def hand_eye_tsai_lenz(
    pairs: Sequence[MotionPair], min_rotation_deg: float = DEFAULT_MIN_ROTATION_DEG
) -> HandEyeResult:
    """Solve A_i X = X B_i with the Tsai-Lenz two-step linear method.

    Pairs whose robot rotation is below ``min_rotation_deg`` are discarded first.

    Raises:
        InsideOutError: INSUFFICIENT_MOTIONS with fewer than two usable pairs,
            UNOBSERVABLE_AXIS when every rotation axis is parallel.
    """
    if len(pairs) < 2:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_MOTIONS,
            message=f"Hand-eye calibration needs at least 2 motion pairs, got {len(pairs)}",
        )

    min_angle = np.radians(min_rotation_deg)
    usable = [p for p in pairs if rotation_angle(p.a) >= min_angle]
    discarded = len(pairs) - len(usable)
    if discarded:
        logger.warning(f"Discarded {discarded} motion pairs rotating less than {min_rotation_deg} deg")
    if len(usable) < 2:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_MOTIONS,
            message=f"Only {len(usable)} motion pairs rotate at least {min_rotation_deg} deg",
            details={"discarded": discarded},
        )

    axes = np.array([to_axis_angle(p.a.rotation).axis for p in usable])
    s = np.linalg.svd(axes, compute_uv=False)
    if s[1] / s[0] < PARALLEL_AXIS_RATIO:
        raise InsideOutError(
            code=ErrorCode.UNOBSERVABLE_AXIS,
            message="All motion rotation axes are parallel; the rotation about that axis is unobservable",
        )

    # rotation: skew(Pa + Pb) Px' = Pb - Pa
    lhs = []
    rhs = []
    for pair in usable:
        pa = _modified_rodrigues(pair.a)
        pb = _modified_rodrigues(pair.b)
        lhs.append(skew(pa + pb))
        rhs.append(pb - pa)
    px_prime, *_ = np.linalg.lstsq(np.vstack(lhs), np.concatenate(rhs), rcond=None)
    norm = float(np.linalg.norm(px_prime))
    theta = 2.0 * np.arctan(norm)
    rotvec = px_prime / norm * theta if norm > 0 else np.zeros(3)
    r_x = Rotation.from_rotvec(rotvec).as_matrix()

    # translation: (R_A - I) t_X = R_X t_B - t_A
    lhs = []
    rhs = []
    for pair in usable:
        lhs.append(pair.a.rotation_matrix - np.eye(3))
        rhs.append(r_x @ pair.b.translation - pair.a.translation)
    t_x, *_ = np.linalg.lstsq(np.vstack(lhs), np.concatenate(rhs), rcond=None)

    x = RigidTransform.from_rotation(Rotation.from_matrix(r_x), t_x)
    rot_res, trans_res = _hand_eye_residuals(usable, x)
    logger.info(
        f"Hand-eye solved from {len(usable)} pairs: rotation residual {rot_res:.4f} deg, "
        f"translation residual {trans_res:.4f} mm"
    )
    return HandEyeResult(
        transform=x,
        rotation_residual_deg=rot_res,
        translation_residual_mm=trans_res,
        pairs_used=len(usable),
        pairs_discarded=discarded,
    )


def hand_eye_eye_on_base(
    pairs: Sequence[MotionPair], min_rotation_deg: float = DEFAULT_MIN_ROTATION_DEG
) -> HandEyeResult:
    """Tracker pose in the robot base frame from pairs built by ``motion_pairs_eye_on_base``."""
    return hand_eye_tsai_lenz(pairs, min_rotation_deg=min_rotation_deg)


def _hand_eye_residuals(pairs: Sequence[MotionPair], x: RigidTransform) -> tuple[float, float]:
    angles = []
    offsets = []
    for pair in pairs:
        lhs = compose(pair.a, x)
        rhs = compose(x, pair.b)
        angles.append(geodesic_angle(lhs.rotation, rhs.rotation))
        offsets.append(np.linalg.norm(lhs.translation - rhs.translation))
    return float(np.degrees(np.mean(angles))), float(np.sqrt(np.mean(np.square(offsets))))


def rigid_register_arrays(source: np.ndarray, target: np.ndarray) -> RegistrationResult:
    """Least-squares rigid transform T minimizing sum |T p_i - q_i|^2 (SVD, det-corrected)."""
    p = np.asarray(source, dtype=float).reshape(-1, 3)
    q = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(p) != len(q):
        raise InsideOutError(
            code=ErrorCode.LENGTH_MISMATCH,
            message=f"Point sets differ in length ({len(p)} vs {len(q)})",
        )
    if len(p) < 3:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_CORRESPONDENCES,
            message=f"Rigid registration needs at least 3 points, got {len(p)}",
        )

    centroid_p = p.mean(axis=0)
    centroid_q = q.mean(axis=0)
    pm = p - centroid_p
    qm = q - centroid_q

    spread = np.linalg.svd(pm, compute_uv=False)
    if spread[0] == 0 or spread[1] / spread[0] < 1e-9:
        raise InsideOutError(
            code=ErrorCode.DEGENERATE_CONFIGURATION,
            message="Registration points are collinear or coincident",
        )

    h = pm.T @ qm
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    # reflection case
    if np.linalg.det(r) < 0:
        vt[2, :] *= -1
        r = vt.T @ u.T
    t = centroid_q - r @ centroid_p

    transform = RigidTransform.from_rotation(Rotation.from_matrix(r), t)
    residuals = np.linalg.norm(transform.apply(p) - q, axis=1)
    fre = float(np.sqrt(np.mean(residuals**2)))
    return RegistrationResult(transform=transform, fre_mm=fre, residuals_mm=residuals)


def rigid_register(points: Sequence[PointCorrespondence]) -> RegistrationResult:
    """Register correspondences p -> q; FRE is the RMS of the residual distances."""
    if not points:
        raise InsideOutError(code=ErrorCode.INSUFFICIENT_CORRESPONDENCES, message="No correspondences given")
    source = np.array([c.p for c in points], dtype=float)
    target = np.array([c.q for c in points], dtype=float)
    return rigid_register_arrays(source, target)


def us_calibrate(
    stylus_tips: np.ndarray,
    image_points: np.ndarray,
    pixel_spacing: tuple[float, float],
    probe_poses: Sequence[RigidTransform],
) -> RegistrationResult:
    """Image-plane to probe-sensor transform from tracked stylus tips.

    Args:
        stylus_tips: (N, 3) stylus tip positions in the tracker frame.
        image_points: (N, 2) pixels where the tip appears in the ultrasound image.
        pixel_spacing: (sx, sy) in mm per pixel.
        probe_poses: Probe-sensor pose in the tracker frame at each acquisition.

    Returns:
        Registration whose transform maps image-plane mm to the probe-sensor frame.
    """
    tips = np.asarray(stylus_tips, dtype=float).reshape(-1, 3)
    pixels = np.asarray(image_points, dtype=float).reshape(-1, 2)
    if not (len(tips) == len(pixels) == len(probe_poses)):
        raise InsideOutError(
            code=ErrorCode.LENGTH_MISMATCH,
            message="stylus_tips, image_points and probe_poses must have equal length",
        )
    sx, sy = pixel_spacing
    plane = np.column_stack([pixels[:, 0] * sx, pixels[:, 1] * sy, np.zeros(len(pixels))])
    in_sensor = np.array([invert(pose).apply(tip) for pose, tip in zip(probe_poses, tips)])
    result = rigid_register_arrays(plane, in_sensor)
    logger.info(f"Ultrasound calibration from {len(tips)} stylus points: FRE {result.fre_mm:.4f} mm")
    return result
