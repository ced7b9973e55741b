"""Configuration models for experiments, sensors, and solvers."""

from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from insideout.xform import RigidTransform


class PoseConfig(BaseModel):
    """Rigid transform as written in config files (mm, rotation vector in degrees)."""

    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_deg: tuple[float, float, float] = Field(
        default=(0.0, 0.0, 0.0),
        description="Rotation vector in degrees (axis * angle)",
    )

    def to_transform(self) -> RigidTransform:
        """Convert to a RigidTransform (radians internally)."""
        return RigidTransform.from_rotvec(
            np.radians(np.asarray(self.rotation_deg, dtype=float)),
            np.asarray(self.translation_mm, dtype=float),
        )


class RunConfig(BaseModel):
    """Run-level settings."""

    name: str = "insideout-experiment"
    seed: int = Field(default=7, ge=0)
    log_level: Literal["debug", "info", "warning", "error"] = "info"


class SceneConfig(BaseModel):
    """Synthetic operating-room scene."""

    bounds_min_mm: tuple[float, float, float] = (-2500.0, -2500.0, 0.0)
    bounds_max_mm: tuple[float, float, float] = (2500.0, 2500.0, 3000.0)
    n_landmarks: int = Field(default=2000, ge=1)
    wall_fraction: float = Field(default=0.7, ge=0.0, le=1.0)
    n_clusters: int = Field(default=8, ge=1)
    cluster_sigma_mm: float = Field(default=250.0, gt=0)
    n_markers: int = Field(default=12, ge=0)
    marker_size_mm: float = Field(default=160.0, gt=0)

    @model_validator(mode="after")
    def validate_bounds(self) -> "SceneConfig":
        """Ensure the room box is non-empty."""
        if any(lo >= hi for lo, hi in zip(self.bounds_min_mm, self.bounds_max_mm)):
            raise ValueError("bounds_min_mm must be strictly below bounds_max_mm on every axis")
        return self


class CameraConfig(BaseModel):
    """Stereo camera model; both cameras share intrinsics (rectified pair)."""

    width: int = Field(default=640, ge=1)
    height: int = Field(default=480, ge=1)
    fx: float = Field(default=615.0, gt=0)
    fy: float = Field(default=615.0, gt=0)
    cx: float = Field(default=320.0, ge=0)
    cy: float = Field(default=240.0, ge=0)
    k1: float = 0.0
    k2: float = 0.0
    baseline_mm: float = Field(default=50.0, gt=0)
    rate_hz: float = Field(default=30.0, gt=0)
    min_depth_mm: float = Field(default=100.0, gt=0)
    max_range_mm: float = Field(default=6000.0, gt=0)

    @model_validator(mode="after")
    def validate_principal_point(self) -> "CameraConfig":
        """Principal point must lie inside the sensor."""
        if self.cx >= self.width or self.cy >= self.height:
            raise ValueError("principal point must lie inside the image")
        return self


class RigConfig(BaseModel):
    """Static transforms of the combined probe mount."""

    t_ee_rgb: PoseConfig = Field(
        default_factory=lambda: PoseConfig(translation_mm=(30.0, 0.0, 80.0), rotation_deg=(0.0, 0.0, 2.0))
    )
    t_rgb_stereo: PoseConfig = Field(
        default_factory=lambda: PoseConfig(translation_mm=(-15.0, 0.0, 0.0))
    )
    t_rb_ots: PoseConfig = Field(
        default_factory=lambda: PoseConfig(
            translation_mm=(1800.0, 900.0, 1400.0), rotation_deg=(0.0, 0.0, 150.0)
        )
    )
    t_ee_marker: PoseConfig = Field(
        default_factory=lambda: PoseConfig(translation_mm=(0.0, 45.0, 60.0), rotation_deg=(10.0, 0.0, 0.0))
    )
    t_rgb_us: PoseConfig = Field(
        default_factory=lambda: PoseConfig(
            translation_mm=(0.0, 30.0, 20.0), rotation_deg=(0.0, -90.0, 0.0)
        )
    )


class SequenceConfig(BaseModel):
    """One ground-truth trajectory."""

    name: str
    kind: Literal["sweep", "rotation_only", "freehand"] = "sweep"
    n_samples: int = Field(default=1800, ge=2)
    extent_mm: float = Field(default=1000.0, ge=0)
    pan_deg: float = Field(default=40.0, ge=0, le=90)


def _default_sequences() -> list[SequenceConfig]:
    # 8698 poses over five sequences
    return [
        SequenceConfig(name="seq01", kind="sweep", n_samples=1740),
        SequenceConfig(name="seq02", kind="freehand", n_samples=1800, extent_mm=600.0),
        SequenceConfig(name="seq03", kind="rotation_only", n_samples=1700),
        SequenceConfig(name="seq04", kind="sweep", n_samples=1728, extent_mm=800.0),
        SequenceConfig(name="seq05", kind="freehand", n_samples=1730, extent_mm=500.0),
    ]


class NoiseConfig(BaseModel):
    """Simulated sensor noise."""

    pixel_sigma: float = Field(default=0.3, ge=0)
    detection_prob: float = Field(default=0.95, ge=0.0, le=1.0)
    id_corruption_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    ots_trans_sigma: float = Field(default=0.15, ge=0, description="mm")
    ots_rot_sigma: float = Field(default=0.08, ge=0, description="deg")
    ots_latency: float = Field(default=0.030, ge=0, description="s")
    ots_rate: float = Field(default=20.0, gt=0, description="Hz")
    marker_pixel_sigma: float = Field(default=0.5, ge=0)


class TrackingConfig(BaseModel):
    """Stereo visual odometry parameters."""

    min_init_landmarks: int = Field(default=50, ge=1)
    ransac_threshold_px: float = Field(default=2.0, gt=0)
    ransac_min_inliers: int = Field(default=10, ge=4)
    ransac_max_iterations: int = Field(default=100, ge=1)
    ransac_confidence: float = Field(default=0.999, gt=0, lt=1)
    refine_max_iterations: int = Field(default=20, ge=1)
    refine_tolerance: float = Field(default=1e-10, gt=0)
    keyframe_min_tracked_fraction: float = Field(default=0.6, ge=0, le=1)
    keyframe_translation_mm: float = Field(default=100.0, gt=0)
    keyframe_rotation_deg: float = Field(default=10.0, gt=0)
    cull_after_checks: int = Field(default=50, ge=1)
    cull_min_observations: int = Field(default=3, ge=1)
    max_vertical_disparity_px: float = Field(default=2.0, gt=0)
    max_triangulation_depth_mm: float = Field(default=10000.0, gt=0)
    map_refine_iterations: int = Field(default=5, ge=0)
    map_max_reprojection_px: float = Field(
        default=0.9, gt=0, description="Landmarks reprojecting worse than this over their keyframes are culled"
    )


class CalibrationConfig(BaseModel):
    """Offline calibration parameters."""

    min_rotation_deg: float = Field(default=5.0, ge=0)
    undistort_max_iterations: int = Field(default=20, ge=1)
    undistort_tolerance: float = Field(default=1e-10, gt=0)
    n_planar_views: int = Field(default=5, ge=3)
    n_motion_pairs: int = Field(default=10, ge=2)
    n_stylus_points: int = Field(default=12, ge=3)
    stylus_noise_mm: float = Field(default=0.5, ge=0)


class VolumeConfig(BaseModel):
    """Voxel grid for compounding."""

    dims: tuple[int, int, int] = (120, 120, 120)
    spacing_mm: float = Field(default=0.5, gt=0)
    origin_mm: tuple[float, float, float] | None = Field(
        default=None, description="Volume-frame origin; centred on the swept region when omitted"
    )
    hole_fill: bool = True
    hole_fill_min_neighbors: int = Field(default=4, ge=1, le=6)
    workers: int = Field(default=1, ge=1)


class UltrasoundConfig(BaseModel):
    """Ultrasound image, phantom, and sweep."""

    width_px: int = Field(default=240, ge=1)
    height_px: int = Field(default=240, ge=1)
    spacing_mm: tuple[float, float] = (0.25, 0.25)
    phantom_radius_mm: float = Field(default=20.0, gt=0)
    inside_intensity: float = Field(default=200.0, ge=0, le=255)
    outside_intensity: float = Field(default=40.0, ge=0, le=255)
    boundary_band_mm: float = Field(default=1.0, ge=0)
    speckle_sigma: float = Field(default=0.0, ge=0)
    sweep_frames: int = Field(default=200, ge=2)
    sweep_span_mm: float = Field(default=60.0, gt=0)
    sweep_fan_deg: float = Field(default=4.0, ge=0)
    volume: VolumeConfig = Field(default_factory=VolumeConfig)

    @field_validator("spacing_mm")
    @classmethod
    def validate_spacing(cls, v: tuple[float, float]) -> tuple[float, float]:
        """Pixel spacing must be positive."""
        if v[0] <= 0 or v[1] <= 0:
            raise ValueError("spacing_mm must be positive")
        return v


class SyncConfig(BaseModel):
    """Temporal pose synchronization."""

    rate_hz: float = Field(default=500.0, gt=0)
    search_window_s: float = Field(default=0.2, gt=0)
    min_overlap_s: float = Field(default=2.0, gt=0)
    min_angular_speed_var: float = Field(default=1e-8, ge=0, description="rad^2/s^2")


class EvaluationConfig(BaseModel):
    """Evaluation protocol."""

    angle_floor_deg: float = Field(default=2.0, ge=0)
    axis_reference: Literal["start", "consecutive"] = "start"
    axis_step: int = Field(default=1, ge=1)
    max_gap_s: float = Field(default=0.06, gt=0, description="Longest estimate gap bridged by interpolation (s)")


class ExperimentConfig(BaseModel):
    """Root configuration model."""

    run: RunConfig = Field(default_factory=RunConfig)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    camera: CameraConfig = Field(default_factory=CameraConfig)
    rig: RigConfig = Field(default_factory=RigConfig)
    sequences: list[SequenceConfig] = Field(default_factory=_default_sequences)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    ultrasound: UltrasoundConfig = Field(default_factory=UltrasoundConfig)
    sync: SyncConfig = Field(default_factory=SyncConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def validate_sequences(self) -> "ExperimentConfig":
        """Sequence names must be unique and at least one sequence must exist."""
        if not self.sequences:
            raise ValueError("At least one sequence must be configured")
        names = [s.name for s in self.sequences]
        if len(set(names)) != len(names):
            raise ValueError("Sequence names must be unique")
        return self
