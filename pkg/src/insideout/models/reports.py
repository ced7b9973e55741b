"""Result schemas written by the commands."""

from pydantic import BaseModel, Field


# Tracking

class SessionStatistics(BaseModel):
    """Summary of one visual odometry session."""

    map_size: int
    keyframe_count: int
    frames_tracked: int
    frames_lost: int
    mean_inlier_ratio: float
    landmark_reprojection_rms_px: float
    landmark_reprojection_max_px: float = 0.0
    pending_landmarks: int = 0


# Calibration

class HandEyeReport(BaseModel):
    """Solved hand-eye transform with residuals."""

    variant: str
    transform: list[float] = Field(..., description="tx, ty, tz, qw, qx, qy, qz")
    rotation_residual_deg: float
    translation_residual_mm: float
    pairs_used: int
    pairs_discarded: int


class IntrinsicsReport(BaseModel):
    """Refined camera intrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float
    k2: float
    width: int
    height: int
    rms_error_px: float
    views: int


class UsCalibrationReport(BaseModel):
    """Image-plane to probe transform from stylus points."""

    transform: list[float] = Field(..., description="tx, ty, tz, qw, qx, qy, qz")
    fre_mm: float
    points: int
    pixel_spacing_mm: tuple[float, float]


# Synchronization

class LatencyReport(BaseModel):
    """Estimated clock offset between two pose streams."""

    reference: str
    target: str
    offset_s: float
    peak_correlation: float
    overlap_s: float


# Compounding

class VolumeMetadata(BaseModel):
    """Sidecar describing a raw voxel volume."""

    dims: tuple[int, int, int]
    spacing_mm: float
    origin_mm: tuple[float, float, float]
    orientation: list[float] = Field(..., description="tx, ty, tz, qw, qx, qy, qz")
    frames_used: int
    frames_skipped: int
    filled_voxels: int
    dtype: str = "float32"
    byte_order: str = "little"


class SphereFitReport(BaseModel):
    """Sphere fitted to a compounded volume."""

    center_mm: tuple[float, float, float]
    radius_mm: float
    rms_residual_mm: float
    boundary_points: int
    iso_threshold: float


# Evaluation

class SourceErrorRow(BaseModel):
    """Errors of one tracking source against ground truth."""

    source: str
    kind: str
    translation_residuals_mm: list[float] = Field(default_factory=list)
    translation_rms_mm: float | None = None
    translation_std_mm: float | None = None
    axis_deviation_deg: list[float] = Field(default_factory=list)
    axis_deviation_mean_deg: float | None = None
    axis_deviation_std_deg: float | None = None
    axis_pairs_excluded: int = 0
    geodesic_deg: list[float] = Field(default_factory=list)
    geodesic_mean_deg: float | None = None
    geodesic_std_deg: float | None = None
    pose_count: int
    lost_count: int


class SequenceBreakdown(BaseModel):
    """Per-sequence rows of a multi-sequence evaluation."""

    sequence: str
    rows: list[SourceErrorRow]


class ErrorReport(BaseModel):
    """Comparison of all sources against robot ground truth."""

    rows: list[SourceErrorRow]
    sequences: list[SequenceBreakdown] = Field(default_factory=list)
    axis_reference: str = "start"
    angle_floor_deg: float = 2.0
