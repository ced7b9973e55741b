"""Visual odometry on simulated operating-room sequences."""

import numpy as np
import pytest

from insideout.bench import axis_deviation, translation_rms
from insideout.models.config import RigConfig, TrackingConfig
from insideout.optics import make_stereo_rig
from insideout.orsim import NoiseModel, RigSetup, StereoRenderer, generate_scene, generate_trajectory
from insideout.vostereo import ransac_pnp, track_sequence
from insideout.xform import RigidTransform, compose, invert

from .conftest import SEED

PIXEL_SIGMA = 0.3


def simulate_frames(
    kind: str, n_samples: int, noise: NoiseModel, extent_mm: float = 1000.0, pan_deg: float = 40.0
) -> tuple[list, list[RigidTransform]]:
    """Stereo frames of one simulated sequence and the true camera poses relative to the first."""
    scene = generate_scene(SEED, n_landmarks=2000)
    trajectory = generate_trajectory(kind, n_samples=n_samples, seed=SEED, extent_mm=extent_mm, pan_deg=pan_deg)
    rig_setup = RigSetup.from_config(RigConfig())
    renderer = StereoRenderer(scene, make_stereo_rig(), noise, SEED)
    cameras = [rig_setup.stereo_camera(ee) for ee in trajectory.poses]
    frames = [(float(t), renderer.render(k, pose)) for k, (t, pose) in enumerate(zip(trajectory.timestamps, cameras))]
    start = invert(cameras[0])
    return frames, [compose(start, c) for c in cameras]


def tracked_error_mm(session, truth: list[RigidTransform]) -> float:
    residuals = [
        entry.pose.translation - pose.translation for entry, pose in zip(session.trajectory, truth) if not entry.lost
    ]
    return translation_rms(np.array(residuals))[0]


def path_length(poses: list[RigidTransform]) -> float:
    positions = np.array([p.translation for p in poses])
    return float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))


class TestMapConsistency:
    """Tests for landmark reprojection over keyframes."""

    @pytest.mark.slow
    def test_noisy_sweep_keeps_map_within_three_sigma(self):
        """Test that every landmark reprojects within three pixel sigmas over its keyframes."""
        noise = NoiseModel(pixel_sigma=PIXEL_SIGMA, detection_prob=0.95)
        frames, _ = simulate_frames("sweep", 300, noise)
        session = track_sequence(make_stereo_rig(), frames, seed=SEED)
        stats = session.statistics()
        assert stats.frames_lost == 0
        assert stats.keyframe_count >= 2
        assert stats.landmark_reprojection_rms_px <= 3 * PIXEL_SIGMA
        assert stats.landmark_reprojection_max_px <= 3 * PIXEL_SIGMA


class TestIdCorruption:
    """Tests for tracking with wrongly associated feature ids."""

    def test_inlier_mask_excludes_corrupted_ids(self):
        """Test that no relabelled observation is kept as an inlier."""
        noise = NoiseModel(pixel_sigma=PIXEL_SIGMA, id_corruption_prob=0.3)
        scene = generate_scene(SEED, n_landmarks=2000)
        trajectory = generate_trajectory("sweep", n_samples=30, seed=SEED)
        camera = RigSetup.from_config(RigConfig()).stereo_camera(trajectory.poses[10])
        rig = make_stereo_rig()
        frame = StereoRenderer(scene, rig, noise, SEED).render(10, camera)
        outliers = np.array([obs.outlier for obs in frame])
        assert 0.2 < outliers.mean() < 0.4

        pairs = [(scene.positions[obs.feature_id], obs) for obs in frame]
        pose, mask = ransac_pnp(pairs, rig, prior=camera, seed=SEED)
        assert not np.any(mask & outliers)
        assert mask[~outliers].mean() > 0.9
        assert np.linalg.norm(pose.translation - camera.translation) < 5.0

    @pytest.mark.slow
    def test_corrupted_sweep_close_to_clean(self):
        """Test that 30% id corruption at most doubles the pose error of a clean run."""
        clean_frames, truth = simulate_frames("sweep", 300, NoiseModel(pixel_sigma=PIXEL_SIGMA))
        corrupted_frames, _ = simulate_frames("sweep", 300, NoiseModel(pixel_sigma=PIXEL_SIGMA, id_corruption_prob=0.3))
        rig = make_stereo_rig()
        clean = track_sequence(rig, clean_frames, seed=SEED)
        corrupted = track_sequence(rig, corrupted_frames, seed=SEED)

        assert corrupted.statistics().frames_lost == 0
        assert tracked_error_mm(corrupted, truth) <= 2.0 * tracked_error_mm(clean, truth)
        assert corrupted.statistics().landmark_reprojection_max_px <= 3 * PIXEL_SIGMA


class TestRotationOnly:
    """Tests for a camera panning about a fixed pivot."""

    @pytest.mark.slow
    def test_pan_never_lost(self):
        """Test that a ±40° pan at 0.3 px noise stays tracked with accurate rotation axes."""
        noise = NoiseModel(pixel_sigma=PIXEL_SIGMA)
        frames, truth = simulate_frames("rotation_only", 300, noise, pan_deg=40.0)
        session = track_sequence(make_stereo_rig(), frames, seed=SEED)
        assert session.statistics().frames_lost == 0
        estimated = [entry.pose for entry in session.trajectory]
        deviation = axis_deviation(truth, estimated, angle_floor_deg=5.0)
        assert deviation.deviations_deg.size > 0
        assert float(np.max(deviation.deviations_deg)) <= 0.5


class TestMetricScale:
    """Tests for the absolute scale of stereo odometry."""

    def test_trajectory_length_matches_ground_truth(self):
        """Test that the travelled distance equals the true distance."""
        frames, truth = simulate_frames("sweep", 60, NoiseModel(), extent_mm=300.0)
        session = track_sequence(make_stereo_rig(), frames, TrackingConfig(min_init_landmarks=20), seed=SEED)
        assert session.statistics().frames_lost == 0
        estimated = [entry.pose for entry in session.trajectory]
        assert path_length(estimated) == pytest.approx(path_length(truth), rel=1e-6)
        assert path_length(truth) > 100.0
