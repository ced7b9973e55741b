"""calibrate: hand-eye, camera intrinsics and ultrasound image-to-probe transforms."""

import logging
from pathlib import Path
from typing import Any

from insideout import formats
from insideout.commands import relative
from insideout.models.config import ExperimentConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.models.reports import HandEyeReport, IntrinsicsReport, UsCalibrationReport
from insideout.optics import calibrate_intrinsics
from insideout.register import (
    hand_eye_eye_on_base,
    hand_eye_tsai_lenz,
    motion_pairs_eye_on_base,
    motion_pairs_eye_on_hand,
    us_calibrate,
)

logger = logging.getLogger(__name__)

VARIANTS = ("eye_on_hand", "eye_on_base")


def run_calibrate_handeye(
    config: ExperimentConfig, problem: Path, output: Path, variant: str | None = None
) -> dict[str, Any]:
    """
    Solve AX = XB from absolute (robot, sensor) pose pairs.

    The variant comes from ``variant`` or the ``# variant=...`` comment of the problem
    file, defaulting to eye_on_hand.
    """
    robot, sensor, comments = formats.read_pose_pairs(problem)
    variant = variant or formats.comment_values(comments).get("variant", "eye_on_hand")
    if variant not in VARIANTS:
        raise InsideOutError(
            code=ErrorCode.INVALID_INPUT,
            message=f"Unknown hand-eye variant '{variant}'",
            details={"allowed": list(VARIANTS)},
        )

    min_rotation = config.calibration.min_rotation_deg
    if variant == "eye_on_hand":
        result = hand_eye_tsai_lenz(motion_pairs_eye_on_hand(robot, sensor), min_rotation_deg=min_rotation)
    else:
        result = hand_eye_eye_on_base(motion_pairs_eye_on_base(robot, sensor), min_rotation_deg=min_rotation)

    report = HandEyeReport(
        variant=variant,
        transform=formats.transform_to_list(result.transform),
        rotation_residual_deg=result.rotation_residual_deg,
        translation_residual_mm=result.translation_residual_mm,
        pairs_used=result.pairs_used,
        pairs_discarded=result.pairs_discarded,
    )
    path = formats.write_model(output / f"handeye_{variant}.yaml", report)
    return {"result": relative(path, output), **report.model_dump(mode="json")}


def run_calibrate_camera(config: ExperimentConfig, problem: Path, output: Path) -> dict[str, Any]:
    views = formats.read_planar_views(problem)
    cam = calibrate_intrinsics(views, width=config.camera.width, height=config.camera.height)
    report = IntrinsicsReport(
        fx=cam.fx,
        fy=cam.fy,
        cx=cam.cx,
        cy=cam.cy,
        k1=cam.k1,
        k2=cam.k2,
        width=cam.width,
        height=cam.height,
        rms_error_px=float(cam.rms_error or 0.0),
        views=len(views),
    )
    path = formats.write_model(output / "intrinsics.yaml", report)
    return {"result": relative(path, output), **report.model_dump(mode="json")}


def run_calibrate_us(config: ExperimentConfig, problem: Path, output: Path) -> dict[str, Any]:
    """Pixel spacing comes from the ``# spacing_mm=sx,sy`` comment, else from the configuration."""
    tips, pixels, probe_poses, comments = formats.read_stylus_points(problem)
    spacing = tuple(config.ultrasound.spacing_mm)
    declared = formats.comment_values(comments).get("spacing_mm")
    if declared:
        try:
            sx, sy = (float(v) for v in declared.split(","))
        except ValueError as e:
            raise InsideOutError(
                code=ErrorCode.FILE_FORMAT,
                message=f"{problem}: bad spacing_mm comment '{declared}'",
                details={"path": str(problem)},
            ) from e
        spacing = (sx, sy)

    result = us_calibrate(tips, pixels, spacing, probe_poses)
    report = UsCalibrationReport(
        transform=formats.transform_to_list(result.transform),
        fre_mm=result.fre_mm,
        points=len(tips),
        pixel_spacing_mm=spacing,
    )
    path = formats.write_model(output / "us_calibration.yaml", report)
    return {"result": relative(path, output), **report.model_dump(mode="json")}
