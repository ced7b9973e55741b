"""Temporal pose synchronization and freehand 3D ultrasound compounding."""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation, Slerp

from insideout.cache import image_plane_points
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.xform import RigidTransform, compose, interpolate, invert

logger = logging.getLogger(__name__)

PHANTOM_INSIDE_INTENSITY = 200.0
PHANTOM_OUTSIDE_INTENSITY = 40.0


class TimedPoseStream:
    """Timestamped poses from one source; timestamps strictly increasing (s)."""

    def __init__(self, source: str, timestamps: Sequence[float] | np.ndarray, poses: Sequence[RigidTransform]):
        ts = np.array(timestamps, dtype=float).reshape(-1)
        if len(ts) != len(poses):
            raise InsideOutError(
                code=ErrorCode.LENGTH_MISMATCH,
                message=f"{len(ts)} timestamps for {len(poses)} poses in stream '{source}'",
            )
        if len(ts) == 0:
            raise InsideOutError(code=ErrorCode.EMPTY_INPUT, message=f"Pose stream '{source}' is empty")
        if np.any(np.diff(ts) <= 0):
            index = int(np.argmax(np.diff(ts) <= 0))
            raise InsideOutError(
                code=ErrorCode.NON_MONOTONIC_TIMESTAMPS,
                message=f"Timestamps of stream '{source}' are not strictly increasing at sample {index + 1}",
                details={"source": source, "index": index + 1},
            )
        self.source = source
        self.timestamps = ts
        self.timestamps.setflags(write=False)
        self.poses = list(poses)

    @classmethod
    def from_records(cls, source: str, records: np.ndarray) -> "TimedPoseStream":
        """Build from (N, 8) rows of timestamp, tx, ty, tz, qw, qx, qy, qz."""
        rows = np.asarray(records, dtype=float).reshape(-1, 8)
        return cls(source, rows[:, 0], [RigidTransform.from_record(r[1:]) for r in rows])

    def records(self) -> np.ndarray:
        return np.column_stack([self.timestamps, np.array([p.to_record() for p in self.poses])])

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def start(self) -> float:
        return float(self.timestamps[0])

    @property
    def end(self) -> float:
        return float(self.timestamps[-1])

    @property
    def duration(self) -> float:
        return self.end - self.start

    def shifted(self, offset_s: float) -> "TimedPoseStream":
        """Same poses with every timestamp moved by ``offset_s``."""
        return TimedPoseStream(self.source, self.timestamps + offset_s, self.poses)

    def mapped(self, source: str, left: RigidTransform, right: RigidTransform) -> "TimedPoseStream":
        """Stream of left ∘ pose ∘ right."""
        return TimedPoseStream(source, self.timestamps, [compose(compose(left, p), right) for p in self.poses])

    def rotations(self) -> Rotation:
        wxyz = np.array([p.rotation for p in self.poses])
        return Rotation.from_quat(wxyz[:, [1, 2, 3, 0]])

    def translations(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


def pose_at(stream: TimedPoseStream, t: float) -> RigidTransform:
    """Pose at time t, interpolated between the bracketing samples.

    Raises:
        InsideOutError: OUT_OF_RANGE for t outside [first, last]; there is no extrapolation.
    """
    ts = stream.timestamps
    if not ts[0] <= t <= ts[-1]:
        raise InsideOutError(
            code=ErrorCode.OUT_OF_RANGE,
            message=f"t={t:.6f}s is outside stream '{stream.source}' [{ts[0]:.6f}, {ts[-1]:.6f}]",
        )
    i = int(np.searchsorted(ts, t, side="right")) - 1
    if ts[i] == t:
        return stream.poses[i]
    alpha = (t - ts[i]) / (ts[i + 1] - ts[i])
    return interpolate(stream.poses[i], stream.poses[i + 1], float(alpha))


def poses_at(stream: TimedPoseStream, times: np.ndarray) -> tuple[list[RigidTransform | None], np.ndarray]:
    """Vectorized ``pose_at``; out-of-range times yield None.

    Returns:
        (poses, valid mask)
    """
    times = np.asarray(times, dtype=float)
    ts = stream.timestamps
    valid = (times >= ts[0]) & (times <= ts[-1])
    result: list[RigidTransform | None] = [None] * len(times)
    if not valid.any():
        return result, valid
    inside = times[valid]
    if len(stream) == 1:
        rotations = stream.rotations()
        rot = Rotation.concatenate([rotations] * len(inside))
        trans = np.repeat(stream.translations(), len(inside), axis=0)
    else:
        rot = Slerp(ts, stream.rotations())(inside)
        trans_all = stream.translations()
        trans = np.column_stack([np.interp(inside, ts, trans_all[:, k]) for k in range(3)])
    exact = np.searchsorted(ts, inside)
    for j, (index, t) in enumerate(zip(np.flatnonzero(valid), inside)):
        k = exact[j]
        if k < len(ts) and ts[k] == t:
            result[index] = stream.poses[k]
        else:
            result[index] = RigidTransform.from_rotation(rot[j], trans[j])
    return result, valid


# Latency


@dataclass(frozen=True)
class LatencyEstimate:
    """``offset_s`` is how far the target clock lags the reference: target(t) = ref(t - offset)."""

    offset_s: float
    peak_correlation: float
    overlap_s: float


def angular_speed(stream: TimedPoseStream) -> tuple[np.ndarray, np.ndarray]:
    """Angular speed (rad/s) between consecutive samples, stamped at interval midpoints.

    The magnitude of the relative rotation is unchanged by fixed frame changes on either
    side, so streams expressed in different frames produce the same signal.
    """
    if len(stream) < 2:
        raise InsideOutError(code=ErrorCode.INSUFFICIENT_DATA, message="Angular speed needs two samples")
    rotations = stream.rotations()
    relative = rotations[:-1].inv() * rotations[1:]
    dt = np.diff(stream.timestamps)
    midpoints = stream.timestamps[:-1] + 0.5 * dt
    return midpoints, relative.magnitude() / dt


def _normalized_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / denom) if denom > 0 else 0.0


def estimate_latency(
    ref: TimedPoseStream,
    target: TimedPoseStream,
    search_window_s: float = 0.2,
    rate_hz: float = 500.0,
    min_overlap_s: float = 2.0,
    min_variance: float = 1e-8,
) -> LatencyEstimate:
    """Clock offset of ``target`` relative to ``ref`` by angular-speed cross-correlation.

    Both angular-speed signals are resampled on a common grid; the lag with maximal
    normalized cross-correlation within ``±search_window_s`` is refined by fitting a
    parabola through the peak and its neighbours. ``target.shifted(-offset)`` is then
    aligned with ``ref``.

    Raises:
        InsideOutError: INSUFFICIENT_OVERLAP for less than ``min_overlap_s`` common time,
            UNOBSERVABLE_LATENCY when either signal is (nearly) constant.
    """
    t_ref, w_ref = angular_speed(ref)
    t_tgt, w_tgt = angular_speed(target)

    overlap = min(t_ref[-1], t_tgt[-1]) - max(t_ref[0], t_tgt[0])
    if overlap < min_overlap_s:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_OVERLAP,
            message=f"Streams overlap for {max(overlap, 0.0):.3f}s, {min_overlap_s}s required",
            details={"overlap_s": float(overlap)},
        )
    for name, signal in ((ref.source, w_ref), (target.source, w_tgt)):
        if float(np.var(signal)) < min_variance:
            raise InsideOutError(
                code=ErrorCode.UNOBSERVABLE_LATENCY,
                message=f"Motion of stream '{name}' is too uniform to observe latency",
                details={"variance": float(np.var(signal))},
            )

    step = 1.0 / rate_hz
    n_lags = int(np.floor(search_window_s / step))
    lags = np.arange(-n_lags, n_lags + 1) * step
    grid = t_ref[0] + np.arange(int(np.floor((t_ref[-1] - t_ref[0]) / step)) + 1) * step
    ref_signal = np.interp(grid, t_ref, w_ref)

    scores = np.full(len(lags), -np.inf)
    for k, lag in enumerate(lags):
        shifted = grid + lag
        use = (shifted >= t_tgt[0]) & (shifted <= t_tgt[-1])
        if use.sum() * step < min_overlap_s:
            continue
        scores[k] = _normalized_correlation(ref_signal[use], np.interp(shifted[use], t_tgt, w_tgt))
    if not np.isfinite(scores).any():
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_OVERLAP,
            message="No lag in the search window leaves enough overlap",
        )

    best = int(np.argmax(scores))
    offset = float(lags[best])
    if 0 < best < len(lags) - 1 and np.isfinite(scores[best - 1]) and np.isfinite(scores[best + 1]):
        left, centre, right = scores[best - 1], scores[best], scores[best + 1]
        curvature = left - 2.0 * centre + right
        if curvature < 0:
            offset += 0.5 * (left - right) / curvature * step
    logger.info(
        f"Latency of '{target.source}' relative to '{ref.source}': {offset * 1000:.2f} ms "
        f"(peak NCC {scores[best]:.4f})"
    )
    return LatencyEstimate(offset_s=offset, peak_correlation=float(scores[best]), overlap_s=float(overlap))


# Compounding


@dataclass(frozen=True)
class UsFrame:
    """One 8-bit ultrasound image (height, width) with its pixel spacing (sx, sy) in mm."""

    timestamp: float
    pixels: np.ndarray
    spacing_mm: tuple[float, float]


@dataclass(frozen=True)
class VolumeSpec:
    """Voxel grid geometry; voxel (i, j, k) sits at origin + spacing * (i, j, k) in the volume frame."""

    dims: tuple[int, int, int]
    spacing_mm: float
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        if self.spacing_mm <= 0:
            raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="Voxel spacing must be positive")
        if any(d < 1 for d in self.dims):
            raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="Volume dims must be positive")


@dataclass
class VoxelVolume:
    """Mean accumulator over a voxel grid; the value is defined only where weight > 0."""

    spec: VolumeSpec
    value_sum: np.ndarray
    weight: np.ndarray
    frames_used: int = 0
    frames_skipped: int = 0
    hole_filled: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.spec.dims

    def mean(self) -> np.ndarray:
        """Voxel means, 0 where empty."""
        out = np.zeros(self.spec.dims)
        filled = self.weight > 0
        out[filled] = self.value_sum[filled] / self.weight[filled]
        return out

    def filled(self) -> np.ndarray:
        return self.weight > 0

    def voxel_centers_world(self, index: np.ndarray) -> np.ndarray:
        """World positions of integer voxel indices (N, 3)."""
        local = np.asarray(self.spec.origin_mm) + self.spec.spacing_mm * np.asarray(index, dtype=float)
        return self.spec.orientation.apply(local)


def _frame_contribution(
    frame: UsFrame,
    pose_world_us: RigidTransform,
    spec: VolumeSpec,
    world_to_volume: RigidTransform,
) -> tuple[np.ndarray, np.ndarray]:
    """Flat voxel indices and intensities of the pixels that land inside the volume."""
    h, w = frame.pixels.shape
    sx, sy = frame.spacing_mm
    plane = image_plane_points(int(h), int(w), float(sx), float(sy))
    local = compose(world_to_volume, pose_world_us).apply(plane)
    index = np.rint((local - np.asarray(spec.origin_mm)) / spec.spacing_mm).astype(np.int64)
    dims = np.asarray(spec.dims)
    inside = np.all((index >= 0) & (index < dims), axis=1)
    flat = np.ravel_multi_index(tuple(index[inside].T), spec.dims)
    return flat, frame.pixels.ravel()[inside].astype(np.float64)


def _accumulate_chunk(
    chunk: Sequence[tuple[UsFrame, RigidTransform]], spec: VolumeSpec, world_to_volume: RigidTransform
) -> tuple[np.ndarray, np.ndarray]:
    size = int(np.prod(spec.dims))
    value_sum = np.zeros(size)
    weight = np.zeros(size)
    for frame, pose in chunk:
        flat, values = _frame_contribution(frame, pose, spec, world_to_volume)
        value_sum += np.bincount(flat, weights=values, minlength=size)
        weight += np.bincount(flat, minlength=size)
    return value_sum, weight


def fill_holes(volume: VoxelVolume, min_neighbors: int = 4) -> int:
    """Fill empty voxels that have at least ``min_neighbors`` filled 6-neighbours with their mean.

    Returns the number of voxels filled.
    """
    kernel = ndimage.generate_binary_structure(3, 1).astype(float)
    kernel[1, 1, 1] = 0.0
    filled = volume.weight > 0
    means = volume.mean()
    neighbor_count = ndimage.convolve(filled.astype(float), kernel, mode="constant", cval=0.0)
    neighbor_sum = ndimage.convolve(means, kernel, mode="constant", cval=0.0)
    holes = (~filled) & (neighbor_count >= min_neighbors)
    volume.value_sum[holes] = neighbor_sum[holes] / neighbor_count[holes]
    volume.weight[holes] = 1.0
    volume.hole_filled = int(holes.sum())
    return volume.hole_filled


def compound(
    frames: Sequence[UsFrame],
    tracking: TimedPoseStream,
    t_rgb_us: RigidTransform,
    spec: VolumeSpec,
    hole_fill: bool = True,
    min_neighbors: int = 4,
    workers: int = 1,
    tracking_offset_s: float = 0.0,
) -> VoxelVolume:
    """Forward compounding of tracked frames into a voxel grid.

    Every pixel is mapped to world by pose_at(frame time) ∘ t_rgb_us and deposited into its
    nearest voxel with weight 1. Sums are exact in float64 for 8-bit input, so the result
    does not depend on frame order or on how frames are split across workers.

    ``tracking_offset_s`` is the latency of the tracking clock behind the image clock, as
    estimated by ``estimate_latency(image-side stream, tracking)``; a frame stamped t takes
    the pose stamped t + offset. Leave it at 0 for a stream already re-stamped by sync.

    Raises:
        InsideOutError: EMPTY_VOLUME when no pixel lands inside the grid.
    """
    if tracking_offset_s != 0.0:
        tracking = tracking.shifted(-tracking_offset_s)
    posed: list[tuple[UsFrame, RigidTransform]] = []
    skipped = 0
    for frame in frames:
        try:
            posed.append((frame, compose(pose_at(tracking, frame.timestamp), t_rgb_us)))
        except InsideOutError:
            skipped += 1
    if skipped:
        logger.warning(f"Skipped {skipped} ultrasound frames outside the tracked interval")

    world_to_volume = invert(spec.orientation)
    if workers > 1 and len(posed) > 1:
        chunks = [posed[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda c: _accumulate_chunk(c, spec, world_to_volume), chunks))
        value_sum = np.zeros(int(np.prod(spec.dims)))
        weight = np.zeros_like(value_sum)
        for part_sum, part_weight in parts:
            value_sum += part_sum
            weight += part_weight
    else:
        value_sum, weight = _accumulate_chunk(posed, spec, world_to_volume)

    if not np.any(weight > 0):
        raise InsideOutError(
            code=ErrorCode.EMPTY_VOLUME,
            message="No ultrasound pixel falls inside the volume",
            details={"frames": len(frames), "skipped": skipped},
        )

    volume = VoxelVolume(
        spec=spec,
        value_sum=value_sum.reshape(spec.dims),
        weight=weight.reshape(spec.dims),
        frames_used=len(posed),
        frames_skipped=skipped,
    )
    if hole_fill:
        fill_holes(volume, min_neighbors)
    logger.info(
        f"Compounded {len(posed)} frames into {int(np.count_nonzero(volume.weight))} voxels "
        f"({volume.hole_filled} hole-filled, {skipped} skipped)"
    )
    return volume


# Sphere fit


@dataclass(frozen=True)
class SphereFit:
    center: np.ndarray
    radius: float
    rms_residual: float
    boundary_points: int
    iso_threshold: float


def boundary_points(volume: VoxelVolume, iso: float) -> np.ndarray:
    """Iso-surface crossings (world mm) between filled 6-neighbours, linearly interpolated."""
    means = volume.mean()
    filled = volume.filled()
    points = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a = means[tuple(lo)]
        b = means[tuple(hi)]
        both = filled[tuple(lo)] & filled[tuple(hi)]
        crossing = both & ((a - iso) * (b - iso) < 0)
        if not crossing.any():
            continue
        index = np.argwhere(crossing).astype(float)
        fraction = (iso - a[crossing]) / (b[crossing] - a[crossing])
        index[:, axis] += fraction
        points.append(volume.voxel_centers_world(index))
    return np.vstack(points) if points else np.zeros((0, 3))


def fit_sphere(
    volume: VoxelVolume,
    iso: float | None = None,
    min_points: int = 10,
    inside: float = PHANTOM_INSIDE_INTENSITY,
    outside: float = PHANTOM_OUTSIDE_INTENSITY,
) -> SphereFit:
    """Sphere through the iso-surface: algebraic least squares, then geometric refinement.

    ``iso`` defaults to the midpoint of the phantom's ``inside`` and ``outside`` intensities.

    Raises:
        InsideOutError: INSUFFICIENT_DATA with fewer than ``min_points`` boundary points.
    """
    if iso is None:
        iso = 0.5 * (inside + outside)
    points = boundary_points(volume, iso)
    if len(points) < min_points:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_DATA,
            message=f"Found {len(points)} boundary points at iso {iso:.2f}, {min_points} required",
        )

    # |p|^2 = 2 c.p + (r^2 - |c|^2)
    a = np.column_stack([2.0 * points, np.ones(len(points))])
    b = np.sum(points * points, axis=1)
    solution, *_ = np.linalg.lstsq(a, b, rcond=None)
    center0 = solution[:3]
    radius0 = float(np.sqrt(max(solution[3] + center0 @ center0, 0.0)))

    def residuals(params: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - params[:3], axis=1) - params[3]

    result = least_squares(residuals, np.concatenate([center0, [radius0]]), method="lm")
    center = result.x[:3]
    radius = float(abs(result.x[3]))
    rms = float(np.sqrt(np.mean(residuals(np.concatenate([center, [radius]])) ** 2)))
    logger.info(f"Sphere fit: radius {radius:.3f} mm, RMS residual {rms:.4f} mm from {len(points)} points")
    return SphereFit(center=center, radius=radius, rms_residual=rms, boundary_points=len(points), iso_threshold=iso)
