"""Synthetic operating room: scene, trajectories, sensor streams, and calibration problems.

Every random draw comes from a ``numpy.random.Generator`` seeded by the caller. Per-frame
generators are seeded with ``[master_seed, ..., frame_index]`` so frames can be rendered
in any order, or in parallel, with identical results.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from insideout.cache import image_plane_points
from insideout.models.config import NoiseConfig, RigConfig, UltrasoundConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.optics import (
    CameraIntrinsics,
    PlanarView,
    StereoRig,
    estimate_homography,
    normalized_from_pixels,
    pose_from_homography,
    project_points,
)
from insideout.usfuse import (
    PHANTOM_INSIDE_INTENSITY,
    PHANTOM_OUTSIDE_INTENSITY,
    TimedPoseStream,
    UsFrame,
    poses_at,
)
from insideout.vostereo import FeatureObservation, refine_pose
from insideout.xform import RigidTransform, compose, invert

logger = logging.getLogger(__name__)

TrajectoryKind = Literal["sweep", "rotation_only", "freehand"]

# camera looking along world +x, image down = world down
LOOK_ALONG_X = Rotation.from_matrix(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]))
DEFAULT_PIVOT_MM = (0.0, 0.0, 1200.0)
WAYPOINT_SPACING_S = 4.0


@dataclass(frozen=True)
class Marker:
    """Square planar marker; its frame has the plane at z=0 with +z facing into the room."""

    marker_id: int
    pose: RigidTransform
    size_mm: float

    def corners_local(self) -> np.ndarray:
        h = self.size_mm / 2.0
        return np.array([[-h, -h], [h, -h], [h, h], [-h, h]])

    def corners_world(self) -> np.ndarray:
        local = self.corners_local()
        return self.pose.apply(np.column_stack([local, np.zeros(4)]))


@dataclass(frozen=True)
class Scene:
    ids: np.ndarray
    positions: np.ndarray
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    seed: int
    markers: tuple[Marker, ...] = ()

    @property
    def landmarks(self) -> list[tuple[int, np.ndarray]]:
        return list(zip(self.ids.tolist(), self.positions))

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RigSetup:
    """Static transforms of the probe mount and the room."""

    t_ee_rgb: RigidTransform
    t_rgb_stereo: RigidTransform
    t_rb_ots: RigidTransform
    t_ee_marker: RigidTransform
    t_rgb_us: RigidTransform

    @classmethod
    def from_config(cls, config: RigConfig) -> "RigSetup":
        return cls(
            t_ee_rgb=config.t_ee_rgb.to_transform(),
            t_rgb_stereo=config.t_rgb_stereo.to_transform(),
            t_rb_ots=config.t_rb_ots.to_transform(),
            t_ee_marker=config.t_ee_marker.to_transform(),
            t_rgb_us=config.t_rgb_us.to_transform(),
        )

    def stereo_camera(self, ee_pose: RigidTransform) -> RigidTransform:
        """Left stereo camera pose in the robot base for an end-effector pose."""
        return compose(compose(ee_pose, self.t_ee_rgb), self.t_rgb_stereo)

    def rgb_camera(self, ee_pose: RigidTransform) -> RigidTransform:
        return compose(ee_pose, self.t_ee_rgb)


@dataclass(frozen=True)
class NoiseModel:
    pixel_sigma: float = 0.0
    detection_prob: float = 1.0
    id_corruption_prob: float = 0.0
    ots_trans_sigma: float = 0.0
    ots_rot_sigma: float = 0.0
    ots_latency: float = 0.0
    ots_rate: float = 30.0
    marker_pixel_sigma: float = 0.0

    def __post_init__(self) -> None:
        for name in ("detection_prob", "id_corruption_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InsideOutError(code=ErrorCode.INVALID_INPUT, message=f"{name} must be in [0, 1], got {value}")
        for name in ("pixel_sigma", "ots_trans_sigma", "ots_rot_sigma", "ots_latency", "marker_pixel_sigma"):
            if getattr(self, name) < 0:
                raise InsideOutError(code=ErrorCode.INVALID_INPUT, message=f"{name} must be non-negative")
        if self.ots_rate <= 0:
            raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="ots_rate must be positive")

    @classmethod
    def from_config(cls, config: NoiseConfig) -> "NoiseModel":
        return cls(**config.model_dump())


@dataclass(frozen=True)
class SpherePhantom:
    center: np.ndarray
    radius_mm: float = 20.0
    inside: float = PHANTOM_INSIDE_INTENSITY
    outside: float = PHANTOM_OUTSIDE_INTENSITY
    band_mm: float = 1.0

    @property
    def iso_threshold(self) -> float:
        return 0.5 * (self.inside + self.outside)


@dataclass(frozen=True)
class UsImageSpec:
    width: int
    height: int
    spacing_mm: tuple[float, float]

    def __post_init__(self) -> None:
        if self.spacing_mm[0] <= 0 or self.spacing_mm[1] <= 0:
            raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="Ultrasound pixel spacing must be positive")

    @property
    def center_mm(self) -> np.ndarray:
        """Image-plane point at the image centre."""
        return np.array([(self.width - 1) * self.spacing_mm[0] / 2.0, (self.height - 1) * self.spacing_mm[1] / 2.0, 0.0])


def frame_rng(*seeds: int) -> np.random.Generator:
    """Generator for one frame, independent of rendering order."""
    return np.random.default_rng([int(s) for s in seeds])


# Scene


def _sample_walls(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    size = hi - lo
    # faces: x-, x+, y-, y+, z-, z+
    areas = np.array([size[1] * size[2]] * 2 + [size[0] * size[2]] * 2 + [size[0] * size[1]] * 2)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    points = lo + rng.random((n, 3)) * size
    axis = faces // 2
    points[np.arange(n), axis] = np.where(faces % 2 == 0, lo[axis], hi[axis])
    return points


def _sample_clusters(
    rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int, n_clusters: int, sigma: float
) -> np.ndarray:
    margin = 0.15 * (hi - lo)
    centers = lo + margin + rng.random((n_clusters, 3)) * (hi - lo - 2 * margin)
    labels = rng.integers(0, n_clusters, size=n)
    points = centers[labels] + rng.normal(0.0, sigma, size=(n, 3))
    return np.clip(points, lo, hi)


def generate_markers(
    rng: np.random.Generator, bounds_min: np.ndarray, bounds_max: np.ndarray, n_markers: int, size_mm: float
) -> tuple[Marker, ...]:
    """Markers on the four vertical walls, facing inward, at 1.0-1.8 m height.

    The first marker is centred on the +x wall, where the default trajectories look.
    """
    lo = np.asarray(bounds_min, dtype=float)
    hi = np.asarray(bounds_max, dtype=float)
    # marker frame z axis -> inward wall normal
    wall_rotations = {
        0: Rotation.from_matrix(np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])),
        1: Rotation.from_matrix(np.array([[0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])),
        2: Rotation.from_matrix(np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])),
        3: Rotation.from_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])),
    }
    markers = []
    z_lo = lo[2] + min(1000.0, 0.3 * (hi[2] - lo[2]))
    z_hi = min(hi[2], lo[2] + 1800.0)
    for k in range(n_markers):
        wall = 1 if k == 0 else int(rng.integers(0, 4))
        position = lo + rng.random(3) * (hi - lo)
        position[2] = z_lo + rng.random() * (z_hi - z_lo)
        if k == 0:
            position[1] = 0.5 * (lo[1] + hi[1])
            position[2] = 0.5 * (z_lo + z_hi)
        if wall < 2:
            position[0] = lo[0] if wall == 0 else hi[0]
        else:
            position[1] = lo[1] if wall == 2 else hi[1]
        markers.append(Marker(marker_id=k, pose=RigidTransform.from_rotation(wall_rotations[wall], position), size_mm=size_mm))
    return tuple(markers)


def generate_scene(
    seed: int,
    bounds: tuple[Sequence[float], Sequence[float]] = ((-2500.0, -2500.0, 0.0), (2500.0, 2500.0, 3000.0)),
    n_landmarks: int = 2000,
    wall_fraction: float = 0.7,
    n_clusters: int = 8,
    cluster_sigma_mm: float = 250.0,
    n_markers: int = 0,
    marker_size_mm: float = 160.0,
) -> Scene:
    """Landmarks on the room walls plus clutter clusters inside; ids are 0..n-1.

    Raises:
        InsideOutError: INVALID_INPUT for n_landmarks < 1 or an empty box.
    """
    if n_landmarks < 1:
        raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="A scene needs at least one landmark")
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if np.any(lo >= hi):
        raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="Scene bounds are empty")

    rng = np.random.default_rng(seed)
    n_wall = int(round(wall_fraction * n_landmarks))
    n_clutter = n_landmarks - n_wall
    positions = np.vstack(
        [
            _sample_walls(rng, lo, hi, n_wall),
            _sample_clusters(rng, lo, hi, n_clutter, n_clusters, cluster_sigma_mm),
        ]
    )
    markers = generate_markers(rng, lo, hi, n_markers, marker_size_mm)
    logger.debug(f"Scene seed={seed}: {n_wall} wall and {n_clutter} clutter landmarks, {n_markers} markers")
    return Scene(
        ids=np.arange(n_landmarks, dtype=np.int64),
        positions=positions,
        bounds_min=lo,
        bounds_max=hi,
        seed=seed,
        markers=markers,
    )


# Trajectories


def _waypoint_times(duration: float) -> np.ndarray:
    count = max(4, int(np.ceil(duration / WAYPOINT_SPACING_S)) + 1)
    return np.linspace(0.0, duration, count)


def generate_trajectory(
    kind: TrajectoryKind,
    n_samples: int | None = None,
    rate_hz: float = 30.0,
    seed: int = 0,
    duration_s: float | None = None,
    extent_mm: float = 1000.0,
    pan_deg: float = 40.0,
    pivot_mm: Sequence[float] = DEFAULT_PIVOT_MM,
) -> TimedPoseStream:
    """Ground-truth end-effector poses in the robot base frame.

    Splines through seeded waypoints give a C1 path: ``sweep`` translates back and forth
    along the base y axis over ``extent_mm`` with a small fan, ``rotation_only`` keeps the
    end effector at ``pivot_mm`` and pans ±``pan_deg`` about the vertical, ``freehand``
    wanders in all six degrees of freedom. Timestamps are k / rate_hz.
    """
    if rate_hz <= 0:
        raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="rate_hz must be positive")
    if n_samples is None:
        if duration_s is None:
            raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="Give n_samples or duration_s")
        n_samples = int(round(duration_s * rate_hz))
    if n_samples < 2:
        raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="A trajectory needs at least 2 samples")

    rng = np.random.default_rng(seed)
    times = np.arange(n_samples) / rate_hz
    knots = _waypoint_times(float(times[-1]))
    k = len(knots)
    pivot = np.asarray(pivot_mm, dtype=float)
    half = extent_mm / 2.0

    if kind == "sweep":
        sides = np.where(np.arange(k) % 2 == 0, -1.0, 1.0)
        offsets = np.column_stack(
            [rng.normal(0.0, 0.03 * extent_mm, k), sides * half, rng.normal(0.0, 0.05 * extent_mm, k)]
        )
        rotvecs = np.column_stack(
            [rng.normal(0.0, 0.03, k), rng.normal(0.0, 0.05, k), -sides * np.radians(10.0)]
        )
    elif kind == "rotation_only":
        sides = np.where(np.arange(k) % 2 == 0, -1.0, 1.0)
        offsets = np.zeros((k, 3))
        yaw = sides * np.radians(pan_deg)
        yaw[0] = 0.0
        rotvecs = np.column_stack([rng.normal(0.0, 0.03, k), rng.normal(0.0, 0.05, k), yaw])
    elif kind == "freehand":
        offsets = rng.uniform(-half, half, size=(k, 3)) * np.array([0.6, 1.0, 0.4])
        rotvecs = rng.normal(0.0, np.radians(12.0), size=(k, 3))
    else:
        raise InsideOutError(code=ErrorCode.INVALID_INPUT, message=f"Unknown trajectory kind '{kind}'")

    position_spline = CubicSpline(knots, offsets, axis=0, bc_type="clamped")
    rotation_spline = CubicSpline(knots, rotvecs, axis=0, bc_type="clamped")
    positions = pivot + position_spline(times)
    if kind == "rotation_only":
        positions = np.tile(pivot, (n_samples, 1))
    rotations = Rotation.from_rotvec(rotation_spline(times)) * LOOK_ALONG_X
    poses = [RigidTransform.from_rotation(rotations[i], positions[i]) for i in range(n_samples)]
    return TimedPoseStream("robot", times, poses)


# Stereo rendering


def render_stereo_frame(
    scene: Scene,
    camera_pose_world: RigidTransform,
    rig: StereoRig,
    noise: NoiseModel,
    seed: int | Sequence[int],
    min_depth_mm: float = 100.0,
    max_range_mm: float = 6000.0,
) -> list[FeatureObservation]:
    """Observations of the landmarks visible from a left-camera pose.

    A landmark is visible when it lies in front of the camera beyond ``min_depth_mm``,
    within ``max_range_mm`` and inside the left image. The right match is kept only when
    the landmark is also visible in the right image. Corrupted ids are replaced by another
    scene id and labelled as outliers.
    """
    rng = np.random.default_rng(seed)
    pc = invert(camera_pose_world).apply(scene.positions)
    visible = (pc[:, 2] > min_depth_mm) & (np.linalg.norm(pc, axis=1) <= max_range_mm)
    index = np.flatnonzero(visible)
    if index.size == 0:
        return []
    px_left = project_points(rig.left, pc[index])
    in_left = rig.left.in_image(px_left)
    index, px_left = index[in_left], px_left[in_left]
    if index.size == 0:
        return []

    pr = rig.to_right(pc[index])
    right_front = pr[:, 2] > min_depth_mm
    px_right = np.full((len(index), 2), np.nan)
    px_right[right_front] = project_points(rig.right, pr[right_front])
    has_right = right_front & rig.right.in_image(np.nan_to_num(px_right, nan=-1.0))

    n = len(index)
    noise_left = rng.normal(0.0, noise.pixel_sigma, size=(n, 2)) if noise.pixel_sigma > 0 else np.zeros((n, 2))
    noise_right = rng.normal(0.0, noise.pixel_sigma, size=(n, 2)) if noise.pixel_sigma > 0 else np.zeros((n, 2))
    detected = rng.random(n) < noise.detection_prob
    corrupted = rng.random(n) < noise.id_corruption_prob
    replacement = rng.integers(0, max(len(scene) - 1, 1), size=n)

    observations = []
    for j in range(n):
        if not detected[j]:
            continue
        true_position = int(index[j])
        feature_id = int(scene.ids[true_position])
        outlier = False
        if corrupted[j] and len(scene) > 1:
            other = int(replacement[j])
            if other >= true_position:
                other += 1
            feature_id = int(scene.ids[other])
            outlier = True
        observations.append(
            FeatureObservation(
                feature_id=feature_id,
                px_left=px_left[j] + noise_left[j],
                px_right=px_right[j] + noise_right[j] if has_right[j] else None,
                outlier=outlier,
            )
        )
    return observations


class StereoRenderer:
    """Renders frames of one sequence, each from its own ``[seed, sequence_index, frame_index]`` generator."""

    def __init__(
        self,
        scene: Scene,
        rig: StereoRig,
        noise: NoiseModel,
        seed: int,
        sequence_index: int = 0,
        min_depth_mm: float = 100.0,
        max_range_mm: float = 6000.0,
    ):
        self.scene = scene
        self.rig = rig
        self.noise = noise
        self.seed = seed
        self.sequence_index = sequence_index
        self.min_depth_mm = min_depth_mm
        self.max_range_mm = max_range_mm

    def render(self, frame_index: int, camera_pose_world: RigidTransform) -> list[FeatureObservation]:
        return render_stereo_frame(
            self.scene,
            camera_pose_world,
            self.rig,
            self.noise,
            seed=[self.seed, self.sequence_index, frame_index],
            min_depth_mm=self.min_depth_mm,
            max_range_mm=self.max_range_mm,
        )


# Outside-in tracker


def _perturb(pose: RigidTransform, rng: np.random.Generator, trans_sigma: float, rot_sigma_deg: float) -> RigidTransform:
    """Per-axis Gaussian translation noise and a rotation-vector noise rotation applied on the left."""
    t_noise = rng.normal(0.0, trans_sigma, 3) if trans_sigma > 0 else np.zeros(3)
    r_noise = rng.normal(0.0, np.radians(rot_sigma_deg), 3) if rot_sigma_deg > 0 else np.zeros(3)
    rotation = Rotation.from_rotvec(r_noise) * pose.as_rotation()
    return RigidTransform.from_rotation(rotation, pose.translation + t_noise)


def simulate_ots(
    trajectory: TimedPoseStream, rig_setup: RigSetup, noise: NoiseModel, seed: int = 0
) -> TimedPoseStream:
    """Marker poses as reported by the outside-in tracker.

    Marker = EE ∘ t_ee_marker, expressed in the tracker frame through inv(t_rb_ots),
    resampled at ``ots_rate`` on the ground-truth clock, perturbed by the tracker noise,
    and stamped ``ots_latency`` seconds late.
    """
    rng = np.random.default_rng([seed, 1])
    n = int(np.floor(trajectory.duration * noise.ots_rate + 1e-9)) + 1
    times = trajectory.start + np.arange(n) / noise.ots_rate
    times = times[times <= trajectory.end]
    sampled, valid = poses_at(trajectory, times)
    times = times[valid]
    tracker_from_base = invert(rig_setup.t_rb_ots)
    poses = []
    for ee in (p for p in sampled if p is not None):
        marker = compose(compose(tracker_from_base, ee), rig_setup.t_ee_marker)
        poses.append(_perturb(marker, rng, noise.ots_trans_sigma, noise.ots_rot_sigma))
    logger.debug(f"OTS stream: {len(poses)} samples at {noise.ots_rate} Hz, latency {noise.ots_latency * 1000:.1f} ms")
    return TimedPoseStream("ots", times + noise.ots_latency, poses)


def perturb_stream(
    stream: TimedPoseStream, trans_sigma: float, rot_sigma_deg: float, seed: int, source: str | None = None
) -> TimedPoseStream:
    """Copy of a stream with independent per-sample pose noise."""
    rng = np.random.default_rng([seed, 2])
    return TimedPoseStream(
        source or stream.source,
        stream.timestamps,
        [_perturb(p, rng, trans_sigma, rot_sigma_deg) for p in stream.poses],
    )


# Marker-based tracking


def visible_marker_corners(
    scene: Scene,
    camera_pose_world: RigidTransform,
    cam: CameraIntrinsics,
    rng: np.random.Generator,
    pixel_sigma: float,
    min_depth_mm: float = 100.0,
) -> list[tuple[Marker, np.ndarray]]:
    """Markers whose four corners are all in front of the camera and inside the image."""
    to_camera = invert(camera_pose_world)
    found = []
    for marker in scene.markers:
        corners = to_camera.apply(marker.corners_world())
        if np.any(corners[:, 2] <= min_depth_mm):
            continue
        # facing the camera: marker normal points toward the camera centre
        normal = to_camera.rotation_matrix @ marker.pose.rotation_matrix[:, 2]
        if normal @ corners.mean(axis=0) >= 0:
            continue
        px = project_points(cam, corners)
        if not np.all(cam.in_image(px)):
            continue
        if pixel_sigma > 0:
            px = px + rng.normal(0.0, pixel_sigma, size=px.shape)
        found.append((marker, px))
    return found


def _marker_pose_estimate(
    detections: list[tuple[Marker, np.ndarray]], cam: CameraIntrinsics, rig: StereoRig
) -> RigidTransform | None:
    """Camera-in-world from the largest marker's homography, refined on all corners."""

    def area(px: np.ndarray) -> float:
        x, y = px[:, 0], px[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    marker, px = max(detections, key=lambda d: area(d[1]))
    undistorted = normalized_from_pixels(cam, px) * np.array([cam.fx, cam.fy]) + np.array([cam.cx, cam.cy])
    try:
        h = estimate_homography(PlanarView(grid_points=marker.corners_local(), image_points=undistorted))
    except InsideOutError:
        return None
    t_cam_marker = pose_from_homography(cam.matrix, h)
    initial = compose(marker.pose, invert(t_cam_marker))

    correspondences = [
        (corner, FeatureObservation(feature_id=m.marker_id * 4 + c, px_left=p[c]))
        for m, p in detections
        for c, corner in enumerate(m.corners_world())
    ]
    estimate = refine_pose(initial, correspondences, rig)
    return estimate.pose


def simulate_marker_tracking(
    scene: Scene,
    camera_stream: TimedPoseStream,
    rig: StereoRig,
    noise: NoiseModel,
    seed: int = 0,
    sequence_index: int = 0,
) -> TimedPoseStream:
    """Marker-based inside-out poses relative to the first estimated camera pose.

    Frames without a fully visible marker are dropped from the stream.

    Raises:
        InsideOutError: EMPTY_INPUT when no frame sees a marker.
    """
    times = []
    estimates = []
    for index, (t, pose) in enumerate(zip(camera_stream.timestamps, camera_stream.poses)):
        rng = frame_rng(seed, sequence_index, index, 3)
        detections = visible_marker_corners(scene, pose, rig.left, rng, noise.marker_pixel_sigma)
        if not detections:
            continue
        estimate = _marker_pose_estimate(detections, rig.left, rig)
        if estimate is None:
            continue
        times.append(float(t))
        estimates.append(estimate)
    if not estimates:
        raise InsideOutError(code=ErrorCode.EMPTY_INPUT, message="No frame of the sequence sees a marker")
    first_inverse = invert(estimates[0])
    relative = [compose(first_inverse, e) for e in estimates]
    logger.info(f"Marker tracking: {len(relative)}/{len(camera_stream)} frames with a visible marker")
    return TimedPoseStream("aruco", times, relative)


# Ultrasound


def render_us_frame(
    phantom: SpherePhantom,
    probe_pose_world: RigidTransform,
    t_rgb_us: RigidTransform,
    image: UsImageSpec,
    speckle_sigma: float = 0.0,
    seed: int | Sequence[int] | None = None,
) -> np.ndarray:
    """8-bit image of the sphere phantom cut by the ultrasound plane.

    Pixel (u, v) sits at (u * sx, v * sy, 0) in the image plane and reaches the world
    through probe_pose_world ∘ t_rgb_us. Intensity ramps linearly from inside to outside
    across a band of ``band_mm`` centred on the sphere surface.
    """
    sx, sy = image.spacing_mm
    plane = image_plane_points(int(image.height), int(image.width), float(sx), float(sy))
    world = compose(probe_pose_world, t_rgb_us).apply(plane)
    distance = np.linalg.norm(world - phantom.center, axis=1) - phantom.radius_mm
    if phantom.band_mm > 0:
        fraction = np.clip(distance / phantom.band_mm + 0.5, 0.0, 1.0)
    else:
        fraction = (distance > 0).astype(float)
    values = phantom.inside + (phantom.outside - phantom.inside) * fraction
    if speckle_sigma > 0:
        values = values + np.random.default_rng(seed).normal(0.0, speckle_sigma, size=values.shape)
    return np.clip(np.rint(values), 0, 255).astype(np.uint8).reshape(image.height, image.width)


@dataclass
class UsSweep:
    phantom: SpherePhantom
    image: UsImageSpec
    rgb_stream: TimedPoseStream
    frames: list[UsFrame] = field(default_factory=list)


def generate_us_sweep(
    config: UltrasoundConfig,
    rig_setup: RigSetup,
    seed: int = 0,
    rate_hz: float = 30.0,
) -> UsSweep:
    """Slow sweep whose image plane crosses the phantom, with the frames it produces.

    The image plane translates along its normal over ``sweep_span_mm`` while fanning by
    ±``sweep_fan_deg`` about the image's horizontal centre line. The phantom sits at the
    image centre of the mid-sweep plane.
    """
    rng = np.random.default_rng([seed, 4])
    image = UsImageSpec(width=config.width_px, height=config.height_px, spacing_mm=tuple(config.spacing_mm))
    base_rgb = RigidTransform.from_rotvec(
        rng.normal(0.0, 0.2, 3), np.array([450.0, 0.0, 350.0]) + rng.normal(0.0, 20.0, 3)
    )
    base_us = compose(base_rgb, rig_setup.t_rgb_us)
    center_local = image.center_mm
    phantom = SpherePhantom(
        center=base_us.apply(center_local),
        radius_mm=config.phantom_radius_mm,
        inside=config.inside_intensity,
        outside=config.outside_intensity,
        band_mm=config.boundary_band_mm,
    )

    n = config.sweep_frames
    s = np.linspace(-0.5, 0.5, n)
    times = np.arange(n) / rate_hz
    us_from_rgb = invert(rig_setup.t_rgb_us)
    to_center = RigidTransform.from_rotvec(np.zeros(3), center_local)
    from_center = invert(to_center)
    rgb_poses = []
    frames = []
    for i in range(n):
        fan = np.radians(config.sweep_fan_deg) * np.sin(np.pi * s[i])
        motion = compose(
            RigidTransform.from_rotvec(np.zeros(3), (0.0, 0.0, s[i] * config.sweep_span_mm)),
            compose(to_center, compose(RigidTransform.from_rotvec((fan, 0.0, 0.0)), from_center)),
        )
        us_pose = compose(base_us, motion)
        rgb_pose = compose(us_pose, us_from_rgb)
        rgb_poses.append(rgb_pose)
        pixels = render_us_frame(
            phantom, rgb_pose, rig_setup.t_rgb_us, image, config.speckle_sigma, seed=[seed, 5, i]
        )
        frames.append(UsFrame(timestamp=float(times[i]), pixels=pixels, spacing_mm=image.spacing_mm))
    logger.info(f"Ultrasound sweep: {n} frames over {config.sweep_span_mm} mm")
    return UsSweep(phantom=phantom, image=image, rgb_stream=TimedPoseStream("rgb", times, rgb_poses), frames=frames)


# Calibration problems


def simulate_planar_views(
    cam: CameraIntrinsics,
    n_views: int = 5,
    seed: int = 0,
    pixel_sigma: float = 0.0,
    grid_shape: tuple[int, int] = (9, 7),
    square_mm: float = 25.0,
    distance_mm: float = 600.0,
) -> list[PlanarView]:
    """Checkerboard views with tilts about axes spread evenly around the optical axis."""
    rng = np.random.default_rng([seed, 6])
    cols, rows = grid_shape
    gx, gy = np.meshgrid(np.arange(cols) * square_mm, np.arange(rows) * square_mm)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    grid -= grid.mean(axis=0)
    grid_3d = np.column_stack([grid, np.zeros(len(grid))])

    views = []
    for k in range(n_views):
        angle = 2.0 * np.pi * k / n_views + rng.uniform(-0.2, 0.2)
        tilt = np.radians(rng.uniform(20.0, 35.0))
        rotvec = tilt * np.array([np.cos(angle), np.sin(angle), 0.0])
        rotvec[2] = rng.uniform(-0.3, 0.3)
        translation = np.array([rng.uniform(-40.0, 40.0), rng.uniform(-30.0, 30.0), distance_mm + rng.uniform(-60.0, 60.0)])
        pose = RigidTransform.from_rotvec(rotvec, translation)
        px = project_points(cam, pose.apply(grid_3d))
        if pixel_sigma > 0:
            px = px + rng.normal(0.0, pixel_sigma, size=px.shape)
        views.append(PlanarView(grid_points=grid.copy(), image_points=px))
    return views


def _random_pose(rng: np.random.Generator, max_angle_deg: float, max_offset_mm: float) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.3, 1.0) * max_angle_deg)
    return RigidTransform.from_rotvec(axis * angle, rng.uniform(-max_offset_mm, max_offset_mm, 3))


def simulate_hand_eye_problem(
    x_true: RigidTransform,
    n_poses: int,
    variant: Literal["eye_on_hand", "eye_on_base"] = "eye_on_hand",
    seed: int = 0,
    trans_sigma: float = 0.0,
    rot_sigma_deg: float = 0.0,
    t_ee_marker: RigidTransform | None = None,
) -> tuple[list[RigidTransform], list[RigidTransform]]:
    """Absolute (robot, sensor) pose lists consistent with ``x_true``.

    eye_on_hand: sensor pose in a fixed target frame, C = inv(T_target) ∘ E ∘ X.
    eye_on_base: marker pose in the tracker frame, O = inv(X) ∘ E ∘ t_ee_marker.
    Noise perturbs the sensor poses.
    """
    rng = np.random.default_rng([seed, 7])
    base = RigidTransform.from_rotation(LOOK_ALONG_X, DEFAULT_PIVOT_MM)
    robot = [compose(base, _random_pose(rng, 40.0, 200.0)) for _ in range(n_poses)]
    if variant == "eye_on_hand":
        target = RigidTransform.from_rotvec((0.1, -0.2, 0.3), (1500.0, 100.0, 900.0))
        sensor = [compose(compose(invert(target), e), x_true) for e in robot]
    else:
        marker = t_ee_marker or RigidTransform.identity()
        sensor = [compose(compose(invert(x_true), e), marker) for e in robot]
    sensor = [_perturb(s, rng, trans_sigma, rot_sigma_deg) for s in sensor]
    return robot, sensor


def simulate_stylus_problem(
    t_probe_image: RigidTransform,
    image: UsImageSpec,
    n_points: int = 12,
    seed: int = 0,
    tip_sigma_mm: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, list[RigidTransform]]:
    """Stylus tips (tracker frame), their image pixels, and the probe poses at each touch."""
    rng = np.random.default_rng([seed, 8])
    sx, sy = image.spacing_mm
    pixels = np.column_stack(
        [
            rng.uniform(0.1, 0.9, n_points) * (image.width - 1),
            rng.uniform(0.1, 0.9, n_points) * (image.height - 1),
        ]
    )
    plane = np.column_stack([pixels[:, 0] * sx, pixels[:, 1] * sy, np.zeros(n_points)])
    probe_poses = [_random_pose(rng, 30.0, 300.0) for _ in range(n_points)]
    tips = np.array([compose(p, t_probe_image).apply(q) for p, q in zip(probe_poses, plane)])
    if tip_sigma_mm > 0:
        tips = tips + rng.normal(0.0, tip_sigma_mm, size=tips.shape)
    return tips, pixels, probe_poses
