"""Tests for the operating-room simulator."""

import numpy as np
import pytest

from insideout.models.config import RigConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.optics import project_points
from insideout.orsim import (
    LOOK_ALONG_X,
    NoiseModel,
    RigSetup,
    SpherePhantom,
    StereoRenderer,
    UsImageSpec,
    frame_rng,
    generate_scene,
    generate_trajectory,
    perturb_stream,
    render_stereo_frame,
    render_us_frame,
    simulate_marker_tracking,
    simulate_ots,
    simulate_planar_views,
)
from insideout.usfuse import TimedPoseStream
from insideout.xform import RigidTransform, compose, geodesic_angle, invert


def looking_along_x(position) -> RigidTransform:
    return RigidTransform.from_rotation(LOOK_ALONG_X, position)


class TestNoiseModel:
    """Tests for NoiseModel validation."""

    def test_probability_out_of_range(self):
        """Test that probabilities outside [0, 1] are rejected."""
        with pytest.raises(InsideOutError) as exc_info:
            NoiseModel(detection_prob=1.5)
        assert exc_info.value.code == ErrorCode.INVALID_INPUT

    def test_negative_sigma(self):
        """Test that negative noise is rejected."""
        with pytest.raises(InsideOutError) as exc_info:
            NoiseModel(pixel_sigma=-0.1)
        assert exc_info.value.code == ErrorCode.INVALID_INPUT


class TestGenerateScene:
    """Tests for generate_scene."""

    def test_deterministic(self):
        """Test that a seed fixes every landmark."""
        a = generate_scene(5, n_landmarks=300)
        b = generate_scene(5, n_landmarks=300)
        np.testing.assert_array_equal(a.positions, b.positions)
        assert not np.array_equal(a.positions, generate_scene(6, n_landmarks=300).positions)

    def test_ids_and_bounds(self, room_scene):
        """Test ids 0..n-1 and positions inside the room."""
        assert room_scene.ids.tolist() == list(range(1500))
        assert np.all(room_scene.positions >= room_scene.bounds_min)
        assert np.all(room_scene.positions <= room_scene.bounds_max)

    def test_wall_fraction(self):
        """Test that at least the wall share of landmarks lies on a face."""
        scene = generate_scene(2, n_landmarks=1000, wall_fraction=0.7)
        on_face = np.any(
            np.isclose(scene.positions, scene.bounds_min) | np.isclose(scene.positions, scene.bounds_max), axis=1
        )
        assert on_face.sum() >= 700

    def test_first_marker_faces_into_room(self, room_scene):
        """Test that marker 0 hangs on the +x wall facing -x."""
        marker = room_scene.markers[0]
        assert marker.pose.translation[0] == pytest.approx(room_scene.bounds_max[0])
        np.testing.assert_allclose(marker.pose.rotation_matrix[:, 2], [-1.0, 0.0, 0.0], atol=1e-12)
        assert len(room_scene.markers) == 4

    def test_no_landmarks(self):
        """Test that an empty scene is rejected."""
        with pytest.raises(InsideOutError) as exc_info:
            generate_scene(1, n_landmarks=0)
        assert exc_info.value.code == ErrorCode.INVALID_INPUT

    def test_empty_bounds(self):
        """Test that a flat room is rejected."""
        with pytest.raises(InsideOutError) as exc_info:
            generate_scene(1, bounds=((0.0, 0.0, 0.0), (100.0, 100.0, 0.0)))
        assert exc_info.value.code == ErrorCode.INVALID_INPUT


class TestGenerateTrajectory:
    """Tests for generate_trajectory."""

    def test_timestamps(self):
        """Test n samples stamped k / rate."""
        stream = generate_trajectory("sweep", n_samples=90, rate_hz=30.0, seed=1)
        assert len(stream) == 90
        np.testing.assert_allclose(stream.timestamps, np.arange(90) / 30.0)

    def test_duration(self):
        """Test that a duration sets the sample count."""
        assert len(generate_trajectory("freehand", duration_s=2.0, rate_hz=50.0)) == 100

    def test_rotation_only_keeps_position(self):
        """Test that the pivot never moves."""
        stream = generate_trajectory("rotation_only", n_samples=120, seed=2, pivot_mm=(10.0, 20.0, 900.0))
        np.testing.assert_allclose(stream.translations(), np.tile([10.0, 20.0, 900.0], (120, 1)))
        angles = [geodesic_angle(stream.poses[0].rotation, p.rotation) for p in stream.poses]
        assert max(angles) > np.radians(10.0)

    def test_sweep_covers_extent(self):
        """Test that a sweep travels along the base y axis."""
        stream = generate_trajectory("sweep", n_samples=300, seed=3, extent_mm=800.0)
        y = stream.translations()[:, 1]
        assert y.max() - y.min() > 400.0

    def test_deterministic(self):
        """Test that a seed fixes the path."""
        a = generate_trajectory("freehand", n_samples=50, seed=9)
        b = generate_trajectory("freehand", n_samples=50, seed=9)
        np.testing.assert_array_equal(a.records(), b.records())

    def test_unknown_kind(self):
        """Test that an unknown kind is rejected."""
        with pytest.raises(InsideOutError) as exc_info:
            generate_trajectory("orbit", n_samples=10)  # type: ignore[arg-type]
        assert exc_info.value.code == ErrorCode.INVALID_INPUT

    def test_too_short(self):
        """Test that one sample is rejected."""
        with pytest.raises(InsideOutError) as exc_info:
            generate_trajectory("sweep", n_samples=1)
        assert exc_info.value.code == ErrorCode.INVALID_INPUT


class TestRenderStereoFrame:
    """Tests for stereo rendering."""

    def test_noiseless_pixels(self, room_scene, rig):
        """Test that observations are exact projections of the landmarks."""
        pose = looking_along_x((0.0, 0.0, 1200.0))
        frame = render_stereo_frame(room_scene, pose, rig, NoiseModel(), seed=[1, 0, 0])
        assert len(frame) > 20
        pc = invert(pose).apply(room_scene.positions)
        for obs in frame:
            np.testing.assert_allclose(obs.px_left, project_points(rig.left, pc[obs.feature_id]), atol=1e-9)
            assert pc[obs.feature_id][2] > 100.0
            assert not obs.outlier

    def test_right_match_only_when_visible(self, room_scene, rig):
        """Test that right pixels lie inside the right image."""
        frame = render_stereo_frame(room_scene, looking_along_x((0.0, 0.0, 1200.0)), rig, NoiseModel(), seed=0)
        for obs in frame:
            if obs.px_right is not None:
                assert rig.right.in_image(obs.px_right)

    def test_detection_probability_zero(self, room_scene, rig):
        """Test that no landmark is detected with probability zero."""
        frame = render_stereo_frame(
            room_scene, looking_along_x((0.0, 0.0, 1200.0)), rig, NoiseModel(detection_prob=0.0), seed=0
        )
        assert frame == []

    def test_id_corruption(self, room_scene, rig):
        """Test that corrupted ids are labelled outliers and point at another landmark."""
        pose = looking_along_x((0.0, 0.0, 1200.0))
        clean = render_stereo_frame(room_scene, pose, rig, NoiseModel(), seed=4)
        corrupted = render_stereo_frame(room_scene, pose, rig, NoiseModel(id_corruption_prob=1.0), seed=4)
        assert len(clean) == len(corrupted)
        for a, b in zip(clean, corrupted):
            assert b.outlier
            assert a.feature_id != b.feature_id

    def test_seeded_noise(self, room_scene, rig):
        """Test that equal seeds give identical noisy frames."""
        pose = looking_along_x((0.0, 0.0, 1200.0))
        noise = NoiseModel(pixel_sigma=0.5, detection_prob=0.9)
        a = render_stereo_frame(room_scene, pose, rig, noise, seed=[7, 1, 3])
        b = render_stereo_frame(room_scene, pose, rig, noise, seed=[7, 1, 3])
        assert [o.feature_id for o in a] == [o.feature_id for o in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.px_left, y.px_left)

    def test_renderer_seeds_each_frame(self, room_scene, rig):
        """Test that a rendered frame uses the sequence and frame index as its seed."""
        noise = NoiseModel(pixel_sigma=0.3)
        pose = looking_along_x((0.0, 0.0, 1200.0))
        rendered = StereoRenderer(room_scene, rig, noise, seed=2, sequence_index=1).render(4, pose)
        direct = render_stereo_frame(room_scene, pose, rig, noise, seed=[2, 1, 4])
        assert [o.feature_id for o in rendered] == [o.feature_id for o in direct]
        for x, y in zip(rendered, direct):
            np.testing.assert_array_equal(x.px_left, y.px_left)

    def test_frame_order_independent(self, room_scene, rig):
        """Test that a frame does not depend on which frames were rendered before it."""
        noise = NoiseModel(pixel_sigma=0.5)
        pose = looking_along_x((0.0, 0.0, 1200.0))
        forward = StereoRenderer(room_scene, rig, noise, seed=3)
        forward.render(0, pose)
        late = forward.render(5, pose)
        fresh = StereoRenderer(room_scene, rig, noise, seed=3).render(5, pose)
        for x, y in zip(late, fresh):
            np.testing.assert_array_equal(x.px_left, y.px_left)

    def test_frame_rng(self):
        """Test that per-frame generators are reproducible."""
        assert frame_rng(1, 2, 3).random() == frame_rng(1, 2, 3).random()


class TestOutsideInTracker:
    """Tests for simulate_ots and perturb_stream."""

    def test_noiseless_chain(self):
        """Test that OTS poses equal inv(t_rb_ots) ∘ EE ∘ t_ee_marker."""
        rig_setup = RigSetup.from_config(RigConfig())
        trajectory = generate_trajectory("sweep", n_samples=60, seed=1)
        ots = simulate_ots(trajectory, rig_setup, NoiseModel(ots_rate=30.0))
        assert len(ots) == 60
        for ee, marker in zip(trajectory.poses, ots.poses):
            expected = compose(compose(invert(rig_setup.t_rb_ots), ee), rig_setup.t_ee_marker)
            assert geodesic_angle(marker.rotation, expected.rotation) < 1e-9
            assert np.linalg.norm(marker.translation - expected.translation) < 1e-6

    def test_rate_and_latency(self):
        """Test resampling at the tracker rate and late timestamps."""
        rig_setup = RigSetup.from_config(RigConfig())
        trajectory = generate_trajectory("sweep", n_samples=91, seed=1)
        ots = simulate_ots(trajectory, rig_setup, NoiseModel(ots_rate=20.0, ots_latency=0.03))
        assert len(ots) == 61
        np.testing.assert_allclose(ots.timestamps, np.arange(61) / 20.0 + 0.03)

    def test_noise_level(self):
        """Test that translation noise has the configured spread."""
        rig_setup = RigSetup.from_config(RigConfig())
        trajectory = generate_trajectory("sweep", n_samples=900, seed=1)
        clean = simulate_ots(trajectory, rig_setup, NoiseModel(ots_rate=30.0))
        noisy = simulate_ots(trajectory, rig_setup, NoiseModel(ots_rate=30.0, ots_trans_sigma=0.15), seed=2)
        diff = noisy.translations() - clean.translations()
        assert np.std(diff) == pytest.approx(0.15, rel=0.1)

    def test_perturb_stream_zero_noise(self):
        """Test that zero noise leaves poses unchanged and renames the source."""
        trajectory = generate_trajectory("sweep", n_samples=10, seed=1)
        copy = perturb_stream(trajectory, 0.0, 0.0, seed=1, source="vo")
        assert copy.source == "vo"
        np.testing.assert_allclose(copy.records(), trajectory.records(), atol=1e-12)


class TestMarkerTracking:
    """Tests for simulate_marker_tracking."""

    def test_noiseless_relative_poses(self, rig):
        """Test that marker poses equal the camera motion relative to the first frame."""
        scene = generate_scene(3, n_landmarks=10, n_markers=1)
        poses = [
            compose(looking_along_x((0.0, 20.0 * k, 1400.0)), RigidTransform.from_rotvec((0.0, 0.02 * k, 0.0)))
            for k in range(5)
        ]
        stream = simulate_marker_tracking(scene, TimedPoseStream("cam", np.arange(5) / 30.0, poses), rig, NoiseModel())
        assert stream.source == "aruco"
        assert len(stream) == 5
        for estimate, truth in zip(stream.poses, poses):
            expected = compose(invert(poses[0]), truth)
            assert geodesic_angle(estimate.rotation, expected.rotation) < 1e-6
            assert np.linalg.norm(estimate.translation - expected.translation) < 1e-3

    def test_no_marker_visible(self, rig):
        """Test EMPTY_INPUT when the camera faces a wall without markers."""
        scene = generate_scene(3, n_landmarks=10, n_markers=1)
        away = compose(RigidTransform.from_rotvec((0.0, 0.0, np.pi)), looking_along_x((0.0, 0.0, 1400.0)))
        stream = TimedPoseStream("cam", [0.0, 0.1], [away, away])
        with pytest.raises(InsideOutError) as exc_info:
            simulate_marker_tracking(scene, stream, rig, NoiseModel())
        assert exc_info.value.code == ErrorCode.EMPTY_INPUT


class TestUltrasoundRendering:
    """Tests for render_us_frame."""

    def test_inside_and_outside(self):
        """Test intensities at the sphere centre and far outside it."""
        image = UsImageSpec(width=101, height=101, spacing_mm=(0.5, 0.5))
        phantom = SpherePhantom(center=image.center_mm, radius_mm=10.0, band_mm=1.0)
        pixels = render_us_frame(phantom, RigidTransform.identity(), RigidTransform.identity(), image)
        assert pixels.shape == (101, 101)
        assert pixels.dtype == np.uint8
        assert pixels[50, 50] == 200
        assert pixels[0, 0] == 40

    def test_chord_radius(self):
        """Test that a plane 6 mm off the centre of a 10 mm sphere cuts an 8 mm disc."""
        image = UsImageSpec(width=101, height=101, spacing_mm=(0.5, 0.5))
        center = image.center_mm + np.array([0.0, 0.0, 6.0])
        phantom = SpherePhantom(center=center, radius_mm=10.0, band_mm=0.0)
        pixels = render_us_frame(phantom, RigidTransform.identity(), RigidTransform.identity(), image)
        inside = np.count_nonzero(pixels == 200)
        radius = np.sqrt(inside * 0.25 / np.pi)
        assert radius == pytest.approx(8.0, rel=0.02)
        assert np.count_nonzero(pixels == 40) == pixels.size - inside

    def test_invalid_spacing(self):
        """Test that non-positive spacing is rejected."""
        with pytest.raises(InsideOutError) as exc_info:
            UsImageSpec(width=10, height=10, spacing_mm=(0.0, 0.5))
        assert exc_info.value.code == ErrorCode.INVALID_INPUT


class TestPlanarViews:
    """Tests for simulate_planar_views."""

    def test_view_count_and_grid(self, camera):
        """Test the number of views and the 9x7 grid."""
        views = simulate_planar_views(camera, n_views=4, seed=3)
        assert len(views) == 4
        assert all(len(v.grid_points) == 63 for v in views)
        assert all(np.all(camera.in_image(v.image_points)) for v in views)
