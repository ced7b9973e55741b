"""Feature-based stereo visual odometry with a persistent landmark map.

The world frame is the left camera frame of the first tracked frame. Poses handed to
callers are camera-in-world; the solvers work on the inverse (world-to-camera) and
perturb it from the left.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from insideout.models.config import TrackingConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.models.reports import SessionStatistics
from insideout.optics import CameraIntrinsics, StereoRig, project_points, triangulate_many
from insideout.register import rigid_register_arrays
from insideout.xform import RigidTransform, compose, exp_update, geodesic_angle, invert, skew

logger = logging.getLogger(__name__)

MIN_PNP_CORRESPONDENCES = 4
MINIMAL_SOLVER_ITERATIONS = 10
DIVERGENCE_STEPS = 3
MIN_LANDMARK_DEPTH = 1e-9


@dataclass(frozen=True)
class FeatureObservation:
    """A feature seen in the left image, optionally matched in the right image.

    ``outlier`` is ground-truth labelling from the simulator; the tracker never reads it.
    """

    feature_id: int
    px_left: np.ndarray
    px_right: np.ndarray | None = None
    outlier: bool = False


@dataclass
class Landmark:
    """A mapped 3D point; ``keyframes`` indexes the keyframes whose observations constrain it.

    A landmark inserted at a keyframe stays unverified, and is not used for tracking, until a
    later frame sees it again within the inlier threshold.
    """

    id: int
    position_world: np.ndarray
    observation_count: int = 1
    last_seen_check: int = 0
    keyframes: list[int] = field(default_factory=list)
    verified: bool = True


@dataclass
class Keyframe:
    pose: RigidTransform
    timestamp: float
    observations: dict[int, FeatureObservation]
    rotation_cw: np.ndarray = field(init=False, repr=False)
    translation_cw: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        t_cw = invert(self.pose)
        self.rotation_cw = t_cw.rotation_matrix
        self.translation_cw = t_cw.translation


@dataclass(frozen=True)
class TrajectoryEntry:
    timestamp: float
    pose: RigidTransform
    lost: bool = False


class TrackingStatus(str, Enum):
    TRACKING = "tracking"
    LOST = "lost"


@dataclass(frozen=True)
class PoseEstimate:
    """Result of pose refinement (camera-in-world)."""

    pose: RigidTransform
    converged: bool
    iterations: int
    initial_rms_px: float
    final_rms_px: float


@dataclass(frozen=True)
class KeyframeDecision:
    inserted: bool
    reason: str = ""
    new_landmarks: list[int] = field(default_factory=list)
    culled_landmarks: list[int] = field(default_factory=list)


@dataclass
class StereoProblem:
    """Vectorized 3D-2D stereo correspondences; absent right matches are NaN."""

    points_world: np.ndarray
    px_left: np.ndarray
    px_right: np.ndarray

    @classmethod
    def from_pairs(cls, correspondences: Sequence[tuple[np.ndarray, FeatureObservation]]) -> "StereoProblem":
        n = len(correspondences)
        points = np.empty((n, 3))
        left = np.empty((n, 2))
        right = np.full((n, 2), np.nan)
        for i, (point, obs) in enumerate(correspondences):
            points[i] = point
            left[i] = obs.px_left
            if obs.px_right is not None:
                right[i] = obs.px_right
        return cls(points_world=points, px_left=left, px_right=right)

    def __len__(self) -> int:
        return len(self.points_world)

    @property
    def has_right(self) -> np.ndarray:
        return ~np.isnan(self.px_right[:, 0])

    def subset(self, index: np.ndarray) -> "StereoProblem":
        return StereoProblem(self.points_world[index], self.px_left[index], self.px_right[index])


@dataclass
class TrackSession:
    """Mutable state of one tracking run; owned by a single thread."""

    rig: StereoRig
    config: TrackingConfig
    landmarks: dict[int, Landmark]
    keyframes: list[Keyframe]
    current_pose: RigidTransform
    status: TrackingStatus = TrackingStatus.TRACKING
    trajectory: list[TrajectoryEntry] = field(default_factory=list)
    seed: int = 0
    frame_index: int = 0
    checks: int = 0
    inlier_ratios: list[float] = field(default_factory=list)

    def statistics(self) -> SessionStatistics:
        """Map and tracking summary.

        Reprojection error is measured for every landmark over the left and right
        observations of its keyframes: ``landmark_reprojection_rms_px`` pools all of them,
        ``landmark_reprojection_max_px`` is the worst per-landmark RMS.
        """
        ids = [i for i, lm in self.landmarks.items() if lm.keyframes]
        pooled = worst = 0.0
        if ids:
            sse, count, valid, *_ = _map_normal_equations(self.rig, _map_rows(self, ids), self._positions(ids))
            if valid.any():
                pooled = float(np.sqrt(np.sum(sse[valid]) / np.sum(count[valid])))
                worst = float(np.max(np.sqrt(sse[valid] / count[valid])))
        lost = sum(1 for e in self.trajectory if e.lost)
        return SessionStatistics(
            map_size=sum(1 for lm in self.landmarks.values() if lm.verified),
            keyframe_count=len(self.keyframes),
            frames_tracked=len(self.trajectory) - lost,
            frames_lost=lost,
            mean_inlier_ratio=float(np.mean(self.inlier_ratios)) if self.inlier_ratios else 1.0,
            landmark_reprojection_rms_px=pooled,
            landmark_reprojection_max_px=worst,
            pending_landmarks=sum(1 for lm in self.landmarks.values() if not lm.verified),
        )

    def _positions(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.landmarks[i].position_world for i in ids], dtype=float).reshape(-1, 3)

    def tracked_entries(self) -> list[TrajectoryEntry]:
        return [e for e in self.trajectory if not e.lost]


def _unique_observations(frame: Sequence[FeatureObservation]) -> list[FeatureObservation]:
    """Drop every observation whose id occurs more than once in the frame."""
    counts: dict[int, int] = {}
    for obs in frame:
        counts[obs.feature_id] = counts.get(obs.feature_id, 0) + 1
    return [obs for obs in frame if counts[obs.feature_id] == 1]


def _triangulate_observations(
    rig: StereoRig, observations: Sequence[FeatureObservation], config: TrackingConfig
) -> list[tuple[FeatureObservation, np.ndarray]]:
    """Triangulate stereo-matched observations into the left camera frame, skipping degenerate ones."""
    matched = [
        obs
        for obs in observations
        if obs.px_right is not None
        and abs(float(obs.px_left[1]) - float(obs.px_right[1])) <= config.max_vertical_disparity_px
    ]
    if not matched:
        return []
    left = np.array([obs.px_left for obs in matched])
    right = np.array([obs.px_right for obs in matched])
    points, status = triangulate_many(rig, left, right)
    keep = (status == 0) & (points[:, 2] <= config.max_triangulation_depth_mm)
    if keep.any():
        # the point must also reproject into its own stereo pair within the map tolerance
        pair = StereoProblem(points[keep], left[keep], right[keep])
        consistent = _stereo_errors(RigidTransform.identity(), pair, rig) <= config.map_max_reprojection_px
        keep[np.flatnonzero(keep)[~consistent]] = False
    return [(obs, p) for obs, p, k in zip(matched, points, keep) if k]


def init_map(
    rig: StereoRig,
    frame: Sequence[FeatureObservation],
    config: TrackingConfig | None = None,
    timestamp: float = 0.0,
    seed: int = 0,
) -> TrackSession:
    """Start a session by triangulating every stereo match of the first frame.

    Raises:
        InsideOutError: INIT_FAILURE when fewer than ``min_init_landmarks`` matches triangulate.
    """
    config = config or TrackingConfig()
    observations = _unique_observations(frame)
    triangulated = _triangulate_observations(rig, observations, config)
    if len(triangulated) < config.min_init_landmarks:
        raise InsideOutError(
            code=ErrorCode.INIT_FAILURE,
            message=(
                f"Only {len(triangulated)} stereo matches triangulated, "
                f"{config.min_init_landmarks} required to initialise the map"
            ),
            details={"triangulated": len(triangulated), "observations": len(frame)},
        )

    landmarks = {
        obs.feature_id: Landmark(id=obs.feature_id, position_world=p, keyframes=[0]) for obs, p in triangulated
    }
    identity = RigidTransform.identity()
    keyframe = Keyframe(
        pose=identity,
        timestamp=timestamp,
        observations={obs.feature_id: obs for obs in observations if obs.feature_id in landmarks},
    )
    session = TrackSession(
        rig=rig,
        config=config,
        landmarks=landmarks,
        keyframes=[keyframe],
        current_pose=identity,
        trajectory=[TrajectoryEntry(timestamp=timestamp, pose=identity)],
        seed=seed,
    )
    logger.info(f"Map initialised with {len(landmarks)} landmarks")
    return session


# Reprojection model


def _project_with_jacobian(cam: CameraIntrinsics, pc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixels (N, 2) and d(pixel)/d(point) (N, 2, 3) for camera-frame points."""
    z = pc[:, 2]
    x = pc[:, 0] / z
    y = pc[:, 1] / z
    r2 = x * x + y * y
    d = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    g = cam.k1 + 2.0 * cam.k2 * r2
    pixels = np.column_stack([cam.fx * x * d + cam.cx, cam.fy * y * d + cam.cy])

    dxd_dx = d + 2.0 * x * x * g
    dxd_dy = 2.0 * x * y * g
    dyd_dy = d + 2.0 * y * y * g

    n = len(pc)
    dxy_dp = np.zeros((n, 2, 3))
    dxy_dp[:, 0, 0] = 1.0 / z
    dxy_dp[:, 0, 2] = -x / z
    dxy_dp[:, 1, 1] = 1.0 / z
    dxy_dp[:, 1, 2] = -y / z

    # distortion Jacobian is symmetric: dxd/dy == dyd/dx
    jac = np.empty((n, 2, 3))
    jac[:, 0, :] = cam.fx * (dxd_dx[:, None] * dxy_dp[:, 0, :] + dxd_dy[:, None] * dxy_dp[:, 1, :])
    jac[:, 1, :] = cam.fy * (dxd_dy[:, None] * dxy_dp[:, 0, :] + dyd_dy[:, None] * dxy_dp[:, 1, :])
    return pixels, jac


def _point_jacobian(pc: np.ndarray) -> np.ndarray:
    """d(point)/d(delta) (N, 3, 6) for a left perturbation exp(delta) of the world-to-camera pose."""
    n = len(pc)
    jac = np.zeros((n, 3, 6))
    jac[:, :, 0:3] = np.eye(3)
    jac[:, :, 3:6] = -np.array([skew(p) for p in pc])
    return jac


def stereo_residuals(t_cw: RigidTransform, problem: StereoProblem, rig: StereoRig) -> np.ndarray:
    """Stacked reprojection residuals: left (u, v) for every point, then right where matched."""
    residuals, _ = _residuals_and_jacobian(t_cw, problem, rig, with_jacobian=False)
    return residuals


def stereo_jacobian(t_cw: RigidTransform, problem: StereoProblem, rig: StereoRig) -> np.ndarray:
    """Analytic Jacobian of ``stereo_residuals`` under ``t_cw <- exp(delta) t_cw``."""
    _, jacobian = _residuals_and_jacobian(t_cw, problem, rig, with_jacobian=True)
    return jacobian


def _residuals_and_jacobian(
    t_cw: RigidTransform, problem: StereoProblem, rig: StereoRig, with_jacobian: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    pc = t_cw.apply(problem.points_world)
    px_left, j_left = _project_with_jacobian(rig.left, pc)
    res = [(px_left - problem.px_left).ravel()]
    jacs = []
    if with_jacobian:
        dp = _point_jacobian(pc)
        jacs.append(np.einsum("nij,njk->nik", j_left, dp).reshape(-1, 6))

    right = problem.has_right
    if right.any():
        pr = rig.to_right(pc[right])
        px_right, j_right = _project_with_jacobian(rig.right, pr)
        res.append((px_right - problem.px_right[right]).ravel())
        if with_jacobian:
            r_rl = rig.t_right_left.rotation_matrix
            dp_right = np.einsum("ij,njk->nik", r_rl, _point_jacobian(pc[right]))
            jacs.append(np.einsum("nij,njk->nik", j_right, dp_right).reshape(-1, 6))

    residuals = np.concatenate(res)
    jacobian = np.vstack(jacs) if with_jacobian else np.zeros((0, 6))
    return residuals, jacobian


def apply_pose_update(t_cw: RigidTransform, delta: np.ndarray) -> RigidTransform:
    """Left-perturb a world-to-camera pose."""
    return compose(exp_update(delta), t_cw)


def _cost(t_cw: RigidTransform, problem: StereoProblem, rig: StereoRig) -> float:
    r = stereo_residuals(t_cw, problem, rig)
    return float(np.mean(r * r)) if r.size else 0.0


def _gauss_newton(
    t_cw0: RigidTransform,
    problem: StereoProblem,
    rig: StereoRig,
    max_iterations: int,
    tolerance: float,
) -> tuple[RigidTransform, bool, int, float, float]:
    """Returns (best world-to-camera pose, converged, iterations, initial cost, final cost)."""
    cost0 = _cost(t_cw0, problem, rig)
    best, best_cost = t_cw0, cost0
    t_cw, previous = t_cw0, cost0
    increases = 0
    iterations = 0
    for _ in range(max_iterations):
        residuals, jacobian = _residuals_and_jacobian(t_cw, problem, rig)
        if not np.all(np.isfinite(residuals)) or not np.all(np.isfinite(jacobian)):
            break
        delta, *_ = np.linalg.lstsq(jacobian, -residuals, rcond=None)
        if np.linalg.norm(delta) < tolerance:
            break
        iterations += 1
        t_cw = apply_pose_update(t_cw, delta)
        cost = _cost(t_cw, problem, rig)
        if not np.isfinite(cost) or cost > previous:
            increases += 1
            if increases >= DIVERGENCE_STEPS:
                return t_cw0, False, iterations, cost0, cost0
        else:
            increases = 0
        if cost < best_cost:
            best, best_cost = t_cw, cost
        previous = cost
    return best, True, iterations, cost0, best_cost


def refine_pose(
    pose0: RigidTransform,
    inliers: Sequence[tuple[np.ndarray, FeatureObservation]] | StereoProblem,
    rig: StereoRig,
    max_iterations: int = 20,
    tolerance: float = 1e-10,
) -> PoseEstimate:
    """Gauss-Newton refinement of a camera-in-world pose on stereo reprojection error.

    Uses the left image for every inlier and the right image where a match exists.
    Stops when the update norm drops below ``tolerance`` or after ``max_iterations``.
    If the cost rises on three consecutive steps the starting pose is returned with
    ``converged=False``.

    Raises:
        InsideOutError: INSUFFICIENT_CORRESPONDENCES with fewer than 4 inliers.
    """
    problem = inliers if isinstance(inliers, StereoProblem) else StereoProblem.from_pairs(inliers)
    if len(problem) < MIN_PNP_CORRESPONDENCES:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_CORRESPONDENCES,
            message=f"Pose refinement needs at least 4 inliers, got {len(problem)}",
        )
    t_cw, converged, iterations, cost0, cost = _gauss_newton(
        invert(pose0), problem, rig, max_iterations, tolerance
    )
    if not converged:
        logger.debug("Pose refinement diverged; keeping the initial pose")
    return PoseEstimate(
        pose=invert(t_cw) if converged else pose0,
        converged=converged,
        iterations=iterations,
        initial_rms_px=float(np.sqrt(cost0)),
        final_rms_px=float(np.sqrt(cost)),
    )


def _stereo_errors(t_cw: RigidTransform, problem: StereoProblem, rig: StereoRig) -> np.ndarray:
    """Per-correspondence max(left, right) reprojection error; inf behind the camera."""
    pc = t_cw.apply(problem.points_world)
    errors = np.full(len(problem), np.inf)
    front = pc[:, 2] > 1e-9
    if front.any():
        px = project_points(rig.left, pc[front])
        errors[front] = np.linalg.norm(px - problem.px_left[front], axis=1)
    right = problem.has_right & front
    if right.any():
        pr = rig.to_right(pc[right])
        err_r = np.full(int(right.sum()), np.inf)
        ok = pr[:, 2] > 1e-9
        err_r[ok] = np.linalg.norm(project_points(rig.right, pr[ok]) - problem.px_right[right][ok], axis=1)
        errors[right] = np.maximum(errors[right], err_r)
    return errors


def _stereo_seed(problem: StereoProblem, rig: StereoRig) -> RigidTransform | None:
    """World-to-camera seed from triangulated stereo matches (3D-3D registration)."""
    right = problem.has_right
    if right.sum() < 3:
        return None
    pts, status = triangulate_many(rig, problem.px_left[right], problem.px_right[right])
    ok = status == 0
    if ok.sum() < 3:
        return None
    try:
        return rigid_register_arrays(problem.points_world[right][ok], pts[ok]).transform
    except InsideOutError:
        return None


def ransac_pnp(
    correspondences: Sequence[tuple[np.ndarray, FeatureObservation]] | StereoProblem,
    rig: StereoRig,
    prior: RigidTransform | None = None,
    config: TrackingConfig | None = None,
    seed: int | Sequence[int] = 0,
) -> tuple[RigidTransform, np.ndarray]:
    """Robust camera-in-world pose from landmark/observation correspondences.

    Minimal samples of 4 are solved by Gauss-Newton seeded at ``prior`` (or, without a
    prior, at a stereo 3D-3D registration of the sample). A correspondence is an inlier
    when its left and right reprojection errors are below the threshold. The sampler
    adapts its iteration count to the inlier ratio and is deterministic for a given seed.

    Returns:
        (pose, inlier mask) after refitting on the best consensus set.

    Raises:
        InsideOutError: INSUFFICIENT_CORRESPONDENCES with fewer than 4 correspondences,
            NO_CONSENSUS when no hypothesis reaches ``ransac_min_inliers``.
    """
    config = config or TrackingConfig()
    problem = (
        correspondences
        if isinstance(correspondences, StereoProblem)
        else StereoProblem.from_pairs(correspondences)
    )
    n = len(problem)
    if n < MIN_PNP_CORRESPONDENCES:
        raise InsideOutError(
            code=ErrorCode.INSUFFICIENT_CORRESPONDENCES,
            message=f"PnP needs at least 4 correspondences, got {n}",
        )

    rng = np.random.default_rng(seed)
    threshold = config.ransac_threshold_px
    prior_cw = invert(prior) if prior is not None else None

    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    best_hypothesis: RigidTransform | None = None
    required = config.ransac_max_iterations
    iteration = 0
    while iteration < min(required, config.ransac_max_iterations):
        iteration += 1
        sample = problem.subset(rng.choice(n, size=MIN_PNP_CORRESPONDENCES, replace=False))
        seed_cw = prior_cw if prior_cw is not None else _stereo_seed(sample, rig)
        if seed_cw is None:
            continue
        hypothesis, converged, *_ = _gauss_newton(
            seed_cw, sample, rig, MINIMAL_SOLVER_ITERATIONS, config.refine_tolerance
        )
        if not converged:
            continue
        mask = _stereo_errors(hypothesis, problem, rig) < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_hypothesis = count, mask, hypothesis
            ratio = count / n
            if ratio >= 1.0:
                required = iteration
            else:
                miss = 1.0 - ratio**MIN_PNP_CORRESPONDENCES
                required = int(np.ceil(np.log(1.0 - config.ransac_confidence) / np.log(miss))) if miss > 0 else iteration

    if best_hypothesis is None or best_count < config.ransac_min_inliers:
        raise InsideOutError(
            code=ErrorCode.NO_CONSENSUS,
            message=f"Best consensus has {best_count} inliers, {config.ransac_min_inliers} required",
            details={"correspondences": n, "iterations": iteration},
        )

    inliers = problem.subset(best_mask)
    estimate = refine_pose(
        invert(best_hypothesis), inliers, rig, config.refine_max_iterations, config.refine_tolerance
    )
    mask = _stereo_errors(invert(estimate.pose), problem, rig) < threshold
    if mask.sum() < config.ransac_min_inliers:
        mask = best_mask
    logger.debug(f"RANSAC: {int(mask.sum())}/{n} inliers after {iteration} iterations")
    return estimate.pose, mask


def track_frame(
    session: TrackSession, frame: Sequence[FeatureObservation], timestamp: float
) -> RigidTransform:
    """Track one stereo frame against the map and update the session.

    On failure the session enters LOST, the previous pose is reported with a lost flag,
    and later frames try to relocalize by id association against the whole map.
    """
    session.frame_index += 1
    config = session.config
    observations = _unique_observations(frame)
    associated: list[FeatureObservation] = []
    pending: list[FeatureObservation] = []
    for obs in observations:
        landmark = session.landmarks.get(obs.feature_id)
        if landmark is not None:
            (associated if landmark.verified else pending).append(obs)

    if len(associated) < MIN_PNP_CORRESPONDENCES:
        return _mark_lost(session, timestamp, f"only {len(associated)} map associations")

    problem = StereoProblem.from_pairs(
        [(session.landmarks[obs.feature_id].position_world, obs) for obs in associated]
    )
    frame_seed = [session.seed, session.frame_index]
    try:
        pose, mask = ransac_pnp(problem, session.rig, prior=session.current_pose, config=config, seed=frame_seed)
    except InsideOutError as e:
        if e.code != ErrorCode.NO_CONSENSUS:
            raise
        try:
            pose, mask = ransac_pnp(problem, session.rig, prior=None, config=config, seed=frame_seed)
        except InsideOutError as retry_error:
            if retry_error.code != ErrorCode.NO_CONSENSUS:
                raise
            return _mark_lost(session, timestamp, retry_error.message)

    if session.status == TrackingStatus.LOST:
        logger.info(f"Relocalised at frame {session.frame_index} (t={timestamp:.3f}s)")
    session.status = TrackingStatus.TRACKING
    session.current_pose = pose
    session.trajectory.append(TrajectoryEntry(timestamp=timestamp, pose=pose))
    session.inlier_ratios.append(float(mask.mean()))

    session.checks += 1
    inlier_ids = {obs.feature_id for obs, m in zip(associated, mask) if m}
    for landmark_id in inlier_ids:
        landmark = session.landmarks[landmark_id]
        landmark.observation_count += 1
        landmark.last_seen_check = session.checks

    inlier_ids |= _verify_candidates(session, pending, pose)
    keyframe_policy(session, observations, inlier_ids, timestamp)
    return pose


def _verify_candidates(
    session: TrackSession, pending: Sequence[FeatureObservation], pose: RigidTransform
) -> set[int]:
    """Confirm unverified landmarks that reproject within the inlier threshold; drop the others."""
    if not pending:
        return set()
    problem = StereoProblem.from_pairs([(session.landmarks[obs.feature_id].position_world, obs) for obs in pending])
    errors = _stereo_errors(invert(pose), problem, session.rig)
    confirmed = set()
    for obs, error in zip(pending, errors):
        if error < session.config.ransac_threshold_px:
            landmark = session.landmarks[obs.feature_id]
            landmark.verified = True
            landmark.observation_count += 1
            landmark.last_seen_check = session.checks
            confirmed.add(obs.feature_id)
        else:
            del session.landmarks[obs.feature_id]
    if len(confirmed) < len(pending):
        logger.debug(f"Rejected {len(pending) - len(confirmed)} of {len(pending)} candidate landmarks")
    return confirmed


def _mark_lost(session: TrackSession, timestamp: float, reason: str) -> RigidTransform:
    if session.status != TrackingStatus.LOST:
        logger.warning(f"Tracking lost at frame {session.frame_index} (t={timestamp:.3f}s): {reason}")
    session.status = TrackingStatus.LOST
    session.trajectory.append(TrajectoryEntry(timestamp=timestamp, pose=session.current_pose, lost=True))
    return session.current_pose


# Map refinement


@dataclass
class MapRows:
    """One row per (landmark, keyframe) observation; ``owner`` indexes the landmark list."""

    owner: np.ndarray
    rotation_cw: np.ndarray
    translation_cw: np.ndarray
    px_left: np.ndarray
    px_right: np.ndarray


def _map_rows(session: TrackSession, ids: Sequence[int]) -> MapRows:
    owner: list[int] = []
    rotations = []
    translations = []
    left = []
    right = []
    for j, landmark_id in enumerate(ids):
        for k in session.landmarks[landmark_id].keyframes:
            kf = session.keyframes[k]
            obs = kf.observations[landmark_id]
            owner.append(j)
            rotations.append(kf.rotation_cw)
            translations.append(kf.translation_cw)
            left.append(obs.px_left)
            right.append(obs.px_right if obs.px_right is not None else (np.nan, np.nan))
    n = len(owner)
    return MapRows(
        owner=np.array(owner, dtype=np.int64),
        rotation_cw=np.array(rotations, dtype=float).reshape(n, 3, 3),
        translation_cw=np.array(translations, dtype=float).reshape(n, 3),
        px_left=np.array(left, dtype=float).reshape(n, 2),
        px_right=np.array(right, dtype=float).reshape(n, 2),
    )


def _map_normal_equations(
    rig: StereoRig, rows: MapRows, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-landmark squared error, measurement count, validity, J^T J and J^T r.

    A landmark is invalid when it lies behind any camera that observes it.
    """
    n = len(points)
    sse = np.zeros(n)
    count = np.zeros(n)
    hessian = np.zeros((n, 3, 3))
    gradient = np.zeros((n, 3))
    valid = np.ones(n, dtype=bool)

    pc = np.einsum("nij,nj->ni", rows.rotation_cw, points[rows.owner]) + rows.translation_cw
    behind = pc[:, 2] <= MIN_LANDMARK_DEPTH
    valid[rows.owner[behind]] = False
    pc[behind, 2] = 1.0
    px_left, j_left = _project_with_jacobian(rig.left, pc)
    blocks = [(rows.owner, px_left - rows.px_left, np.einsum("nij,njk->nik", j_left, rows.rotation_cw))]

    right = ~np.isnan(rows.px_right[:, 0])
    if right.any():
        pr = rig.to_right(pc[right])
        behind_right = pr[:, 2] <= MIN_LANDMARK_DEPTH
        valid[rows.owner[right][behind_right]] = False
        pr[behind_right, 2] = 1.0
        px_right, j_right = _project_with_jacobian(rig.right, pr)
        r_rl = rig.t_right_left.rotation_matrix
        jac = np.einsum("nij,jk,nkl->nil", j_right, r_rl, rows.rotation_cw[right])
        blocks.append((rows.owner[right], px_right - rows.px_right[right], jac))

    for owner, residual, jac in blocks:
        np.add.at(sse, owner, np.sum(residual * residual, axis=1))
        np.add.at(count, owner, 1.0)
        np.add.at(hessian, owner, np.einsum("nki,nkj->nij", jac, jac))
        np.add.at(gradient, owner, np.einsum("nki,nk->ni", jac, residual))
    return sse, count, valid, hessian, gradient


def refine_landmarks(session: TrackSession, ids: Sequence[int], iterations: int | None = None) -> np.ndarray:
    """Structure-only Gauss-Newton on landmark positions with their keyframe poses held fixed.

    Each landmark is refined independently on the left and right observations of all its
    keyframes; a step is kept only where it lowers that landmark's error.

    Returns:
        Per-landmark reprojection RMS (px) after refinement, inf for a landmark behind
        one of its cameras.
    """
    ids = list(ids)
    if not ids:
        return np.zeros(0)
    iterations = session.config.map_refine_iterations if iterations is None else iterations
    rows = _map_rows(session, ids)
    points = session._positions(ids)
    sse, count, valid, hessian, gradient = _map_normal_equations(session.rig, rows, points)
    eye = np.eye(3)
    for _ in range(iterations):
        damping = (1e-9 * np.trace(hessian, axis1=1, axis2=2) + 1e-12)[:, None, None] * eye
        step = -np.linalg.solve(hessian + damping, gradient[..., None])[..., 0]
        candidate = points + np.where(valid[:, None], step, 0.0)
        new_sse, _, new_valid, new_hessian, new_gradient = _map_normal_equations(session.rig, rows, candidate)
        accept = valid & new_valid & (new_sse < sse)
        if not accept.any():
            break
        points[accept] = candidate[accept]
        sse[accept] = new_sse[accept]
        hessian[accept] = new_hessian[accept]
        gradient[accept] = new_gradient[accept]

    for landmark_id, position in zip(ids, points):
        session.landmarks[landmark_id].position_world = position.copy()
    rms = np.sqrt(sse / np.maximum(count, 1.0))
    rms[~valid] = np.inf
    return rms


def keyframe_policy(
    session: TrackSession,
    frame: Sequence[FeatureObservation],
    tracked_ids: set[int],
    timestamp: float = 0.0,
) -> KeyframeDecision:
    """Insert a keyframe when tracking thins out or the camera moved far enough.

    A keyframe is inserted when the fraction of the last keyframe's landmarks tracked in
    this frame falls below ``keyframe_min_tracked_fraction``, or the pose moved more than
    ``keyframe_translation_mm`` / ``keyframe_rotation_deg`` since the last keyframe.

    On insertion the keyframe keeps the observations of ``tracked_ids`` (the frame's
    inliers), and every tracked landmark is refined over all its keyframes. Stereo matches
    not yet in the map are triangulated as unverified landmarks; unverified landmarks of
    earlier keyframes that were never confirmed are dropped. Culling removes stale
    landmarks and those whose reprojection RMS exceeds ``map_max_reprojection_px``.
    """
    config = session.config
    last = session.keyframes[-1]
    reference_ids = [i for i in last.observations if i in session.landmarks]
    fraction = (
        sum(1 for i in reference_ids if i in tracked_ids) / len(reference_ids) if reference_ids else 0.0
    )
    translation = float(np.linalg.norm(session.current_pose.translation - last.pose.translation))
    rotation = float(np.degrees(geodesic_angle(last.pose.rotation, session.current_pose.rotation)))

    if fraction < config.keyframe_min_tracked_fraction:
        reason = f"tracked fraction {fraction:.2f}"
    elif translation > config.keyframe_translation_mm:
        reason = f"translation {translation:.1f} mm"
    elif rotation > config.keyframe_rotation_deg:
        reason = f"rotation {rotation:.2f} deg"
    else:
        return KeyframeDecision(inserted=False)

    expired = [lid for lid, lm in session.landmarks.items() if not lm.verified]
    for lid in expired:
        del session.landmarks[lid]

    index = len(session.keyframes)
    observations = {
        obs.feature_id: obs for obs in frame if obs.feature_id in tracked_ids and obs.feature_id in session.landmarks
    }
    tracked = list(observations)
    candidates = [obs for obs in frame if obs.feature_id not in session.landmarks]
    new_ids = []
    for obs, point_cam in _triangulate_observations(session.rig, candidates, config):
        session.landmarks[obs.feature_id] = Landmark(
            id=obs.feature_id,
            position_world=session.current_pose.apply(point_cam),
            last_seen_check=session.checks,
            keyframes=[index],
            verified=False,
        )
        observations[obs.feature_id] = obs
        new_ids.append(obs.feature_id)
    session.keyframes.append(Keyframe(pose=session.current_pose, timestamp=timestamp, observations=observations))

    for lid in tracked:
        session.landmarks[lid].keyframes.append(index)
    rms = refine_landmarks(session, tracked)
    inconsistent = {lid for lid, error in zip(tracked, rms) if error > config.map_max_reprojection_px}

    stale = [
        lid
        for lid, lm in session.landmarks.items()
        if session.checks - lm.last_seen_check > config.cull_after_checks
        and lm.observation_count < config.cull_min_observations
        and lid not in inconsistent
    ]
    culled = stale + sorted(inconsistent)
    for lid in culled:
        del session.landmarks[lid]

    logger.debug(
        f"Keyframe {len(session.keyframes)} ({reason}): +{len(new_ids)} candidates, "
        f"-{len(culled)} culled ({len(inconsistent)} inconsistent), -{len(expired)} unconfirmed, "
        f"map size {len(session.landmarks)}"
    )
    return KeyframeDecision(inserted=True, reason=reason, new_landmarks=new_ids, culled_landmarks=culled)


def track_sequence(
    rig: StereoRig,
    frames: Sequence[tuple[float, Sequence[FeatureObservation]]],
    config: TrackingConfig | None = None,
    seed: int = 0,
) -> TrackSession:
    """Initialise on the first frame and track the rest."""
    if not frames:
        raise InsideOutError(code=ErrorCode.EMPTY_INPUT, message="Observation stream has no frames")
    first_t, first_frame = frames[0]
    session = init_map(rig, first_frame, config=config, timestamp=first_t, seed=seed)
    for timestamp, frame in frames[1:]:
        track_frame(session, frame, timestamp)
    stats = session.statistics()
    logger.info(
        f"Tracked {stats.frames_tracked} frames ({stats.frames_lost} lost), "
        f"{stats.keyframe_count} keyframes, map size {stats.map_size}"
    )
    return session
