"""sync and compound: temporal alignment of pose streams and 3D ultrasound compounding."""

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from insideout import formats
from insideout.commands import relative
from insideout.models.config import ExperimentConfig, VolumeConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.models.reports import LatencyReport, SphereFitReport
from insideout.usfuse import (
    TimedPoseStream,
    UsFrame,
    VolumeSpec,
    compound,
    estimate_latency,
    fit_sphere,
    poses_at,
)
from insideout.xform import RigidTransform, compose

logger = logging.getLogger(__name__)


def run_sync(config: ExperimentConfig, reference: Path, target: Path, output: Path) -> dict[str, Any]:
    """Estimate the clock offset of ``target`` and write it with a re-stamped copy of the stream."""
    ref = formats.read_pose_stream(reference)
    tgt = formats.read_pose_stream(target)
    sync = config.sync
    estimate = estimate_latency(
        ref,
        tgt,
        search_window_s=sync.search_window_s,
        rate_hz=sync.rate_hz,
        min_overlap_s=sync.min_overlap_s,
        min_variance=sync.min_angular_speed_var,
    )
    report = LatencyReport(
        reference=ref.source,
        target=tgt.source,
        offset_s=estimate.offset_s,
        peak_correlation=estimate.peak_correlation,
        overlap_s=estimate.overlap_s,
    )
    path = formats.write_model(output / f"latency_{tgt.source}.yaml", report)
    aligned = formats.write_pose_stream(output / f"{tgt.source}_synced.csv", tgt.shifted(-estimate.offset_s))
    return {"result": relative(path, output), "synced": relative(aligned, output), **report.model_dump(mode="json")}


def volume_spec_for(
    volume: VolumeConfig,
    frames: Sequence[UsFrame],
    tracking: TimedPoseStream,
    t_rgb_us: RigidTransform,
) -> VolumeSpec:
    """Axis-aligned grid from the configuration; without an origin it is centred on the frame centres."""
    dims = tuple(int(d) for d in volume.dims)
    if volume.origin_mm is not None:
        return VolumeSpec(dims=dims, spacing_mm=volume.spacing_mm, origin_mm=tuple(volume.origin_mm))

    sampled, _ = poses_at(tracking, np.array([f.timestamp for f in frames]))
    centers = []
    for frame, pose in zip(frames, sampled):
        if pose is None:
            continue
        height, width = frame.pixels.shape
        sx, sy = frame.spacing_mm
        centers.append(compose(pose, t_rgb_us).apply(np.array([(width - 1) * sx / 2, (height - 1) * sy / 2, 0.0])))
    if not centers:
        raise InsideOutError(
            code=ErrorCode.EMPTY_VOLUME,
            message="No ultrasound frame lies inside the tracked interval",
            details={"frames": len(frames)},
        )
    middle = np.mean(centers, axis=0)
    origin = middle - volume.spacing_mm * (np.asarray(dims, dtype=float) - 1.0) / 2.0
    return VolumeSpec(dims=dims, spacing_mm=volume.spacing_mm, origin_mm=tuple(float(v) for v in origin))


def run_compound(
    config: ExperimentConfig,
    frames_path: Path,
    tracking_path: Path,
    calibration_path: Path,
    output: Path,
    tracking_offset_s: float = 0.0,
) -> dict[str, Any]:
    """
    Compound tracked frames into a voxel volume and fit the phantom sphere to it.

    ``tracking_offset_s`` is the latency reported by sync for the raw tracking stream;
    leave it at 0 when ``tracking_path`` is the re-stamped stream sync writes.
    """
    frames = formats.read_us_frames(frames_path)
    tracking = formats.read_pose_stream(tracking_path)
    t_rgb_us = formats.read_transform(calibration_path)
    us = config.ultrasound
    spec = volume_spec_for(us.volume, frames, tracking.shifted(-tracking_offset_s), t_rgb_us)

    volume = compound(
        frames,
        tracking,
        t_rgb_us,
        spec,
        hole_fill=us.volume.hole_fill,
        min_neighbors=us.volume.hole_fill_min_neighbors,
        workers=us.volume.workers,
        tracking_offset_s=tracking_offset_s,
    )
    sidecar = formats.write_volume(output, volume)
    summary: dict[str, Any] = {
        "volume": relative(sidecar, output),
        "frames_used": volume.frames_used,
        "frames_skipped": volume.frames_skipped,
        "filled_voxels": int(np.count_nonzero(volume.filled())),
        "hole_filled": volume.hole_filled,
    }

    try:
        fit = fit_sphere(volume, inside=us.inside_intensity, outside=us.outside_intensity)
    except InsideOutError as e:
        if e.code != ErrorCode.INSUFFICIENT_DATA:
            raise
        logger.warning(f"No sphere fitted: {e.message}")
        return summary

    report = SphereFitReport(
        center_mm=tuple(float(v) for v in fit.center),
        radius_mm=fit.radius,
        rms_residual_mm=fit.rms_residual,
        boundary_points=fit.boundary_points,
        iso_threshold=fit.iso_threshold,
    )
    summary["sphere_fit"] = relative(formats.write_model(output / "sphere_fit.yaml", report), output)
    summary.update(report.model_dump(mode="json"))
    return summary
