"""Tests for hand-eye calibration and point-based registration."""

import numpy as np
import pytest

from insideout.models.errors import ErrorCode, InsideOutError
from insideout.orsim import UsImageSpec, simulate_hand_eye_problem, simulate_stylus_problem
from insideout.register import (
    MotionPair,
    PointCorrespondence,
    hand_eye_eye_on_base,
    hand_eye_tsai_lenz,
    motion_pairs_eye_on_base,
    motion_pairs_eye_on_hand,
    rigid_register,
    rigid_register_arrays,
    us_calibrate,
)
from insideout.xform import RigidTransform, compose, geodesic_angle, invert

X_TRUE = RigidTransform.from_rotvec((0.2, -0.5, 0.9), (35.0, -12.0, 80.0))


def pair_for(a: RigidTransform, x: RigidTransform) -> MotionPair:
    """Exact pair with B = inv(X) A X."""
    return MotionPair(a=a, b=compose(compose(invert(x), a), x))


def assert_close(a: RigidTransform, b: RigidTransform, rot_tol: float, trans_tol: float) -> None:
    assert geodesic_angle(a.rotation, b.rotation) <= rot_tol
    assert np.linalg.norm(a.translation - b.translation) <= trans_tol


class TestMotionPairs:
    """Tests for motion pair construction."""

    def test_eye_on_hand_satisfies_ax_xb(self):
        """Test that simulated eye-on-hand pairs satisfy A X = X B."""
        robot, sensor = simulate_hand_eye_problem(X_TRUE, 6, "eye_on_hand", seed=1)
        pairs = motion_pairs_eye_on_hand(robot, sensor)
        assert len(pairs) == 5
        for pair in pairs:
            assert_close(compose(pair.a, X_TRUE), compose(X_TRUE, pair.b), 1e-9, 1e-7)

    def test_eye_on_base_satisfies_ax_xb(self):
        """Test that simulated eye-on-base pairs satisfy A X = X B."""
        marker = RigidTransform.from_rotvec((0.0, 0.3, 0.0), (0.0, 40.0, 20.0))
        robot, tracker = simulate_hand_eye_problem(X_TRUE, 6, "eye_on_base", seed=1, t_ee_marker=marker)
        for pair in motion_pairs_eye_on_base(robot, tracker):
            assert_close(compose(pair.a, X_TRUE), compose(X_TRUE, pair.b), 1e-9, 1e-6)

    def test_length_mismatch(self):
        """Test that pose lists must have equal length."""
        with pytest.raises(InsideOutError) as exc_info:
            motion_pairs_eye_on_hand([RigidTransform.identity()] * 3, [RigidTransform.identity()] * 2)
        assert exc_info.value.code == ErrorCode.LENGTH_MISMATCH


class TestHandEyeTsaiLenz:
    """Tests for hand_eye_tsai_lenz."""

    def test_noiseless_eye_on_hand(self):
        """Test exact recovery of X from noiseless data."""
        robot, sensor = simulate_hand_eye_problem(X_TRUE, 10, "eye_on_hand", seed=3)
        result = hand_eye_tsai_lenz(motion_pairs_eye_on_hand(robot, sensor))
        assert_close(result.transform, X_TRUE, 1e-8, 1e-5)
        assert result.rotation_residual_deg < 1e-6
        assert result.translation_residual_mm < 1e-5

    def test_noiseless_eye_on_base(self):
        """Test recovery of the tracker pose in the robot base frame."""
        marker = RigidTransform.from_rotvec((0.1, 0.0, -0.2), (10.0, 50.0, -5.0))
        t_rb_ots = RigidTransform.from_rotvec((0.0, 0.0, 2.5), (2500.0, 400.0, 1800.0))
        robot, tracker = simulate_hand_eye_problem(t_rb_ots, 10, "eye_on_base", seed=4, t_ee_marker=marker)
        result = hand_eye_eye_on_base(motion_pairs_eye_on_base(robot, tracker))
        assert_close(result.transform, t_rb_ots, 1e-8, 1e-4)

    def test_hand_built_pairs(self):
        """Test two rotations about different axes determine X."""
        pairs = [
            pair_for(RigidTransform.from_rotvec((0.5, 0.0, 0.0), (10.0, 0.0, 0.0)), X_TRUE),
            pair_for(RigidTransform.from_rotvec((0.0, 0.6, 0.0), (0.0, 20.0, 5.0)), X_TRUE),
        ]
        result = hand_eye_tsai_lenz(pairs)
        assert_close(result.transform, X_TRUE, 1e-9, 1e-6)
        assert result.pairs_used == 2

    def test_noisy_sensor_poses(self):
        """Test bounded error under sensor noise."""
        robot, sensor = simulate_hand_eye_problem(
            X_TRUE, 25, "eye_on_hand", seed=5, trans_sigma=0.1, rot_sigma_deg=0.05
        )
        result = hand_eye_tsai_lenz(motion_pairs_eye_on_hand(robot, sensor))
        assert np.degrees(geodesic_angle(result.transform.rotation, X_TRUE.rotation)) < 1.0
        assert np.linalg.norm(result.transform.translation - X_TRUE.translation) < 10.0
        assert result.rotation_residual_deg > 0

    def test_small_rotations_discarded(self):
        """Test that pairs below the rotation threshold are dropped."""
        pairs = [
            pair_for(RigidTransform.from_rotvec((0.5, 0.0, 0.0), (10.0, 0.0, 0.0)), X_TRUE),
            pair_for(RigidTransform.from_rotvec((0.0, 0.6, 0.0), (0.0, 20.0, 5.0)), X_TRUE),
            pair_for(RigidTransform.from_rotvec((0.0, 0.0, 0.4), (3.0, 0.0, 1.0)), X_TRUE),
            pair_for(RigidTransform.from_rotvec((0.0, 0.0, np.radians(1.0)), (50.0, 0.0, 0.0)), X_TRUE),
        ]
        result = hand_eye_tsai_lenz(pairs)
        assert result.pairs_used == 3
        assert result.pairs_discarded == 1
        assert_close(result.transform, X_TRUE, 1e-9, 1e-6)

    def test_single_pair(self):
        """Test that one pair is insufficient."""
        pairs = [pair_for(RigidTransform.from_rotvec((0.5, 0.0, 0.0)), X_TRUE)]
        with pytest.raises(InsideOutError) as exc_info:
            hand_eye_tsai_lenz(pairs)
        assert exc_info.value.code == ErrorCode.INSUFFICIENT_MOTIONS

    def test_all_below_threshold(self):
        """Test that discarding small rotations can leave too few pairs."""
        pairs = [
            pair_for(RigidTransform.from_rotvec((np.radians(1.0), 0.0, 0.0)), X_TRUE),
            pair_for(RigidTransform.from_rotvec((0.0, np.radians(2.0), 0.0)), X_TRUE),
            pair_for(RigidTransform.from_rotvec((0.0, 0.0, 0.5)), X_TRUE),
        ]
        with pytest.raises(InsideOutError) as exc_info:
            hand_eye_tsai_lenz(pairs)
        assert exc_info.value.code == ErrorCode.INSUFFICIENT_MOTIONS
        assert exc_info.value.details["discarded"] == 2

    def test_parallel_axes(self):
        """Test that rotations about a single axis leave X unobservable."""
        pairs = [
            pair_for(RigidTransform.from_rotvec((0.0, 0.0, angle), (10.0 * i, 5.0, 0.0)), X_TRUE)
            for i, angle in enumerate((0.3, -0.5, 0.8, 0.4))
        ]
        with pytest.raises(InsideOutError) as exc_info:
            hand_eye_tsai_lenz(pairs)
        assert exc_info.value.code == ErrorCode.UNOBSERVABLE_AXIS


class TestRigidRegister:
    """Tests for point-based rigid registration."""

    def test_exact_recovery(self, rng):
        """Test recovery of a known transform with zero FRE."""
        source = rng.uniform(-100.0, 100.0, (20, 3))
        truth = RigidTransform.from_rotvec((0.4, -0.3, 1.2), (100.0, -40.0, 12.0))
        result = rigid_register_arrays(source, truth.apply(source))
        assert_close(result.transform, truth, 1e-10, 1e-8)
        assert result.fre_mm < 1e-9

    def test_coplanar_points_are_not_reflected(self):
        """Test that coplanar points give a proper rotation."""
        gx, gy = np.meshgrid(np.arange(4) * 10.0, np.arange(3) * 10.0)
        source = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
        truth = RigidTransform.from_rotvec((1.0, 0.5, -0.7), (5.0, 6.0, 7.0))
        result = rigid_register_arrays(source, truth.apply(source))
        assert np.linalg.det(result.transform.rotation_matrix) == pytest.approx(1.0)
        assert_close(result.transform, truth, 1e-9, 1e-8)

    def test_fre_is_rms_of_residuals(self, rng):
        """Test FRE definition."""
        source = rng.uniform(-50.0, 50.0, (30, 3))
        target = source + rng.normal(0.0, 0.5, source.shape)
        result = rigid_register_arrays(source, target)
        assert result.fre_mm == pytest.approx(np.sqrt(np.mean(result.residuals_mm**2)))
        assert 0.3 < result.fre_mm < 1.2

    def test_correspondence_objects(self):
        """Test the correspondence-list wrapper."""
        source = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]])
        shift = RigidTransform.from_rotvec((0.0, 0.0, 0.0), (1.0, 2.0, 3.0))
        points = [PointCorrespondence(p=p, q=shift.apply(p)) for p in source]
        result = rigid_register(points)
        np.testing.assert_allclose(result.transform.translation, [1.0, 2.0, 3.0], atol=1e-10)

    def test_two_points(self):
        """Test that two points are insufficient."""
        with pytest.raises(InsideOutError) as exc_info:
            rigid_register_arrays(np.zeros((2, 3)), np.zeros((2, 3)))
        assert exc_info.value.code == ErrorCode.INSUFFICIENT_CORRESPONDENCES

    def test_empty_list(self):
        """Test that no correspondences are rejected."""
        with pytest.raises(InsideOutError) as exc_info:
            rigid_register([])
        assert exc_info.value.code == ErrorCode.INSUFFICIENT_CORRESPONDENCES

    def test_collinear_points(self):
        """Test that collinear points are degenerate."""
        source = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
        with pytest.raises(InsideOutError) as exc_info:
            rigid_register_arrays(source, source)
        assert exc_info.value.code == ErrorCode.DEGENERATE_CONFIGURATION

    def test_length_mismatch(self):
        """Test that point sets must have equal length."""
        with pytest.raises(InsideOutError) as exc_info:
            rigid_register_arrays(np.zeros((4, 3)), np.zeros((5, 3)))
        assert exc_info.value.code == ErrorCode.LENGTH_MISMATCH


class TestUsCalibrate:
    """Tests for stylus-based ultrasound calibration."""

    def test_noiseless_recovery(self):
        """Test exact recovery of the image-to-probe transform."""
        truth = RigidTransform.from_rotvec((0.1, 1.4, -0.2), (20.0, -15.0, 60.0))
        image = UsImageSpec(width=200, height=160, spacing_mm=(0.2, 0.25))
        tips, pixels, poses = simulate_stylus_problem(truth, image, n_points=12, seed=2)
        result = us_calibrate(tips, pixels, image.spacing_mm, poses)
        assert_close(result.transform, truth, 1e-9, 1e-7)
        assert result.fre_mm < 1e-8

    def test_noisy_tips(self):
        """Test that tip noise shows up in the FRE."""
        truth = RigidTransform.from_rotvec((0.1, 1.4, -0.2), (20.0, -15.0, 60.0))
        image = UsImageSpec(width=200, height=160, spacing_mm=(0.2, 0.25))
        tips, pixels, poses = simulate_stylus_problem(truth, image, n_points=20, seed=2, tip_sigma_mm=0.3)
        result = us_calibrate(tips, pixels, image.spacing_mm, poses)
        assert 0.1 < result.fre_mm < 1.0

    def test_length_mismatch(self):
        """Test that inputs must have equal length."""
        with pytest.raises(InsideOutError) as exc_info:
            us_calibrate(np.zeros((4, 3)), np.zeros((3, 2)), (0.2, 0.2), [RigidTransform.identity()] * 4)
        assert exc_info.value.code == ErrorCode.LENGTH_MISMATCH
