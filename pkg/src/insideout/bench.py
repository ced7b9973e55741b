"""Evaluation protocol: map every tracker into the joint RGB frame and score it against the robot.

Chains (robot base RB, end effector EE, RGB camera, stereo camera SR, tracker OTS, marker M):

    ground truth   RB_RGB = RB_EE(i) ∘ t_ee_rgb
    inside-out     RB_RGB = t_rb_ir1_0 ∘ IR1,0_SR(i) ∘ inv(t_rgb_stereo)
    outside-in     RB_RGB = t_rb_ots ∘ OTS_M(i) ∘ inv(t_ee_marker) ∘ t_ee_rgb

Inside-out sources (visual odometry and marker tracking) report poses relative to their
first camera frame; ``t_rb_ir1_0`` anchors that frame in the robot base.
"""

import io
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial.transform import Rotation

from insideout.models.config import EvaluationConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.models.reports import ErrorReport, SequenceBreakdown, SourceErrorRow
from insideout.usfuse import TimedPoseStream, pose_at, poses_at
from insideout.xform import RigidTransform, compose, geodesic_angle, invert

logger = logging.getLogger(__name__)

CHAIN_FIELDS = ("t_ee_rgb", "t_rgb_stereo", "t_rb_ots", "t_ee_marker", "t_rb_ir1_0")


class SourceKind(str, Enum):
    OTS = "ots"
    SLAM = "slam"
    MARKER = "marker"


def source_kind(tag: str) -> SourceKind:
    """Infer the chain of a source from its tag."""
    lowered = tag.lower()
    if lowered.startswith("ots"):
        return SourceKind.OTS
    if lowered.startswith(("vo", "slam", "orb", "dso", "sr")):
        return SourceKind.SLAM
    if lowered.startswith(("aruco", "marker", "ar")):
        return SourceKind.MARKER
    raise InsideOutError(
        code=ErrorCode.INVALID_INPUT,
        message=f"Cannot infer the tracker type of source '{tag}'",
        details={"source": tag},
    )


@dataclass
class FrameChainSpec:
    """Static transforms of the rig plus the anchor of each inside-out source."""

    t_ee_rgb: RigidTransform | None = None
    t_rgb_stereo: RigidTransform | None = None
    t_rb_ots: RigidTransform | None = None
    t_ee_marker: RigidTransform | None = None
    t_rb_ir1_0: RigidTransform | None = None
    anchors: dict[str, RigidTransform] = field(default_factory=dict)

    def require(self, name: str) -> RigidTransform:
        value = getattr(self, name)
        if value is None:
            raise InsideOutError(
                code=ErrorCode.INCOMPLETE_CHAIN,
                message=f"Frame chain is missing {name}",
                details={"missing": name},
            )
        return value

    def anchor_for(self, source: str) -> RigidTransform:
        if source in self.anchors:
            return self.anchors[source]
        return self.require("t_rb_ir1_0")

    def source_to_rgb(self, source: str) -> tuple[RigidTransform, RigidTransform]:
        """(left, right) so that RB_RGB = left ∘ pose ∘ right for this source."""
        kind = source_kind(source)
        if kind == SourceKind.OTS:
            left = self.require("t_rb_ots")
            right = compose(invert(self.require("t_ee_marker")), self.require("t_ee_rgb"))
        else:
            left = self.anchor_for(source)
            right = invert(self.require("t_rgb_stereo"))
        return left, right


def anchor_from_ground_truth(ground_truth: TimedPoseStream, spec: FrameChainSpec, t: float | None = None) -> RigidTransform:
    """Stereo camera pose in the robot base at time t (default: first ground-truth sample)."""
    ee = pose_at(ground_truth, ground_truth.start if t is None else t)
    return compose(compose(ee, spec.require("t_ee_rgb")), spec.require("t_rgb_stereo"))


@dataclass
class AlignedSource:
    """Ground truth and estimate in the RGB frame, paired at ground-truth timestamps."""

    source: str
    kind: SourceKind
    timestamps: np.ndarray
    ground_truth: list[RigidTransform]
    estimate: list[RigidTransform]
    lost_count: int

    def residuals(self) -> list[RigidTransform]:
        """E = inv(GT) ∘ Est per aligned sample."""
        return [compose(invert(g), e) for g, e in zip(self.ground_truth, self.estimate)]

    def translation_residuals(self) -> np.ndarray:
        return np.array([r.translation for r in self.residuals()]).reshape(-1, 3)


def _bridged(stream: TimedPoseStream, times: np.ndarray, max_gap_s: float) -> np.ndarray:
    """True where t coincides with a sample or its bracketing samples are at most max_gap_s apart."""
    ts = stream.timestamps
    inside = (times >= ts[0]) & (times <= ts[-1])
    ok = np.zeros(len(times), dtype=bool)
    if not inside.any():
        return ok
    t = times[inside]
    right = np.clip(np.searchsorted(ts, t, side="left"), 0, len(ts) - 1)
    exact = ts[right] == t
    left = np.clip(right - 1, 0, len(ts) - 1)
    gap = ts[right] - ts[left]
    ok[inside] = exact | (gap <= max_gap_s)
    return ok


def to_common_frame(
    ground_truth: TimedPoseStream,
    streams: Mapping[str, TimedPoseStream] | Sequence[TimedPoseStream],
    spec: FrameChainSpec,
    max_gap_s: float = 0.06,
) -> list[AlignedSource]:
    """Map every source into the RGB frame and pair it with ground truth.

    Sources are resampled at the ground-truth timestamps; samples outside a source's
    time range or inside a gap longer than ``max_gap_s`` are counted as lost.

    Raises:
        InsideOutError: INCOMPLETE_CHAIN naming the first missing transform.
    """
    items = list(streams.items()) if isinstance(streams, Mapping) else [(s.source, s) for s in streams]
    t_ee_rgb = spec.require("t_ee_rgb")
    gt_rgb = [compose(p, t_ee_rgb) for p in ground_truth.poses]

    aligned = []
    for source, stream in items:
        left, right = spec.source_to_rgb(source)
        sampled, valid = poses_at(stream, ground_truth.timestamps)
        valid &= _bridged(stream, ground_truth.timestamps, max_gap_s)
        index = np.flatnonzero(valid)
        estimate = []
        for i in index:
            pose = sampled[i]
            if pose is not None:
                estimate.append(compose(compose(left, pose), right))
        aligned.append(
            AlignedSource(
                source=source,
                kind=source_kind(source),
                timestamps=ground_truth.timestamps[index],
                ground_truth=[gt_rgb[i] for i in index],
                estimate=estimate,
                lost_count=int(len(ground_truth) - len(index)),
            )
        )
        logger.debug(f"Aligned '{source}': {len(index)} poses, {len(ground_truth) - len(index)} lost")
    return aligned


def translation_rms(residuals: np.ndarray) -> tuple[float, float]:
    """RMS and population std of Euclidean residual norms.

    Args:
        residuals: (N, 3) residual vectors or (N,) norms, in mm.

    Raises:
        InsideOutError: EMPTY_INPUT for an empty series.
    """
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise InsideOutError(code=ErrorCode.EMPTY_INPUT, message="No residuals to evaluate")
    norms = np.linalg.norm(r, axis=1) if r.ndim == 2 else np.abs(r)
    return float(np.sqrt(np.mean(norms**2))), float(np.std(norms))


@dataclass(frozen=True)
class AxisDeviation:
    deviations_deg: np.ndarray
    excluded: int

    @property
    def mean_deg(self) -> float:
        return float(np.mean(self.deviations_deg))

    @property
    def std_deg(self) -> float:
        return float(np.std(self.deviations_deg))


def _as_rotation(rotations: Sequence[RigidTransform] | np.ndarray) -> Rotation:
    if isinstance(rotations, np.ndarray):
        wxyz = rotations.reshape(-1, 4)
    else:
        wxyz = np.array([r.rotation for r in rotations]).reshape(-1, 4)
    return Rotation.from_quat(wxyz[:, [1, 2, 3, 0]])


def axis_deviation(
    gt: Sequence[RigidTransform] | np.ndarray,
    est: Sequence[RigidTransform] | np.ndarray,
    angle_floor_deg: float = 2.0,
    reference: str = "start",
    step: int = 1,
) -> AxisDeviation:
    """Angle between rotation axes of corresponding relative rotations, in degrees.

    With ``reference="start"`` the relative rotations are pose 0 -> pose i; with
    ``"consecutive"`` they are pose i -> pose i+step. Pairs whose ground-truth or
    estimated relative angle is below ``angle_floor_deg`` have no meaningful axis and
    are excluded.

    Args:
        gt: Ground-truth poses or (N, 4) quaternions (w, x, y, z).
        est: Estimated poses or quaternions, same length.

    Raises:
        InsideOutError: LENGTH_MISMATCH, INVALID_INPUT for a negative floor or unknown
            reference, NO_VALID_PAIRS when every pair is excluded.
    """
    if len(gt) != len(est):
        raise InsideOutError(
            code=ErrorCode.LENGTH_MISMATCH,
            message=f"Ground truth has {len(gt)} rotations, estimate {len(est)}",
        )
    if angle_floor_deg < 0:
        raise InsideOutError(code=ErrorCode.INVALID_INPUT, message="angle_floor_deg must be non-negative")
    if reference not in ("start", "consecutive") or step < 1:
        raise InsideOutError(code=ErrorCode.INVALID_INPUT, message=f"Unknown axis reference '{reference}' / step {step}")

    if len(gt) < 2:
        raise InsideOutError(code=ErrorCode.NO_VALID_PAIRS, message="Axis deviation needs at least two poses")
    r_gt = _as_rotation(gt)
    r_est = _as_rotation(est)
    if reference == "start":
        rel_gt = r_gt[0].inv() * r_gt[1:]
        rel_est = r_est[0].inv() * r_est[1:]
    else:
        if len(gt) <= step:
            raise InsideOutError(code=ErrorCode.NO_VALID_PAIRS, message=f"Fewer than {step + 1} poses")
        rel_gt = r_gt[:-step].inv() * r_gt[step:]
        rel_est = r_est[:-step].inv() * r_est[step:]

    v_gt = rel_gt.as_rotvec().reshape(-1, 3)
    v_est = rel_est.as_rotvec().reshape(-1, 3)
    a_gt = np.linalg.norm(v_gt, axis=1)
    a_est = np.linalg.norm(v_est, axis=1)
    floor = np.radians(angle_floor_deg)
    keep = (a_gt >= floor) & (a_est >= floor) & (a_gt > 0) & (a_est > 0)
    excluded = int(len(keep) - keep.sum())
    if not keep.any():
        raise InsideOutError(
            code=ErrorCode.NO_VALID_PAIRS,
            message=f"All {len(keep)} relative rotations are below the {angle_floor_deg} deg floor",
            details={"excluded": excluded},
        )
    axes_gt = v_gt[keep] / a_gt[keep, None]
    axes_est = v_est[keep] / a_est[keep, None]
    cosines = np.clip(np.sum(axes_gt * axes_est, axis=1), -1.0, 1.0)
    return AxisDeviation(deviations_deg=np.degrees(np.arccos(cosines)), excluded=excluded)


def _row(aligned: AlignedSource, config: EvaluationConfig) -> SourceErrorRow:
    residuals = aligned.residuals()
    norms = np.array([np.linalg.norm(r.translation) for r in residuals])
    rms, std = translation_rms(norms) if len(norms) else (None, None)
    geodesic = np.degrees([geodesic_angle(np.array([1.0, 0.0, 0.0, 0.0]), r.rotation) for r in residuals])

    axis_mean = axis_std = None
    axis_series: list[float] = []
    excluded = 0
    try:
        dev = axis_deviation(
            aligned.ground_truth,
            aligned.estimate,
            config.angle_floor_deg,
            config.axis_reference,
            config.axis_step,
        )
        axis_series = dev.deviations_deg.tolist()
        axis_mean, axis_std, excluded = dev.mean_deg, dev.std_deg, dev.excluded
    except InsideOutError as e:
        if e.code != ErrorCode.NO_VALID_PAIRS:
            raise
        excluded = int(e.details.get("excluded", max(len(residuals) - 1, 0)))
        logger.warning(f"No valid axis-deviation pairs for '{aligned.source}'")

    return SourceErrorRow(
        source=aligned.source,
        kind=aligned.kind.value,
        translation_residuals_mm=norms.tolist(),
        translation_rms_mm=rms,
        translation_std_mm=std,
        axis_deviation_deg=axis_series,
        axis_deviation_mean_deg=axis_mean,
        axis_deviation_std_deg=axis_std,
        axis_pairs_excluded=excluded,
        geodesic_deg=list(map(float, geodesic)),
        geodesic_mean_deg=float(np.mean(geodesic)) if len(geodesic) else None,
        geodesic_std_deg=float(np.std(geodesic)) if len(geodesic) else None,
        pose_count=len(residuals),
        lost_count=aligned.lost_count,
    )


def _pooled_row(source: str, rows: Sequence[SourceErrorRow]) -> SourceErrorRow:
    norms = np.concatenate([np.asarray(r.translation_residuals_mm) for r in rows])
    axis = np.concatenate([np.asarray(r.axis_deviation_deg) for r in rows])
    geodesic = np.concatenate([np.asarray(r.geodesic_deg) for r in rows])
    rms, std = translation_rms(norms) if norms.size else (None, None)
    return SourceErrorRow(
        source=source,
        kind=rows[0].kind,
        translation_residuals_mm=norms.tolist(),
        translation_rms_mm=rms,
        translation_std_mm=std,
        axis_deviation_deg=axis.tolist(),
        axis_deviation_mean_deg=float(np.mean(axis)) if axis.size else None,
        axis_deviation_std_deg=float(np.std(axis)) if axis.size else None,
        axis_pairs_excluded=sum(r.axis_pairs_excluded for r in rows),
        geodesic_deg=geodesic.tolist(),
        geodesic_mean_deg=float(np.mean(geodesic)) if geodesic.size else None,
        geodesic_std_deg=float(np.std(geodesic)) if geodesic.size else None,
        pose_count=sum(r.pose_count for r in rows),
        lost_count=sum(r.lost_count for r in rows),
    )


@dataclass
class SequenceInput:
    name: str
    ground_truth: TimedPoseStream
    streams: list[TimedPoseStream]
    spec: FrameChainSpec


def make_report(
    sequences: Sequence[SequenceInput],
    config: EvaluationConfig | None = None,
) -> ErrorReport:
    """Run the protocol on every sequence; rows pool all sequences per source.

    A single sequence produces one breakdown entry identical to the pooled rows.
    """
    config = config or EvaluationConfig()
    if not sequences:
        raise InsideOutError(code=ErrorCode.EMPTY_INPUT, message="No sequences to evaluate")

    breakdown = []
    per_source: dict[str, list[SourceErrorRow]] = {}
    for seq in sequences:
        aligned = to_common_frame(seq.ground_truth, seq.streams, seq.spec, config.max_gap_s)
        rows = [_row(a, config) for a in aligned]
        breakdown.append(SequenceBreakdown(sequence=seq.name, rows=rows))
        for row in rows:
            per_source.setdefault(row.source, []).append(row)

    pooled = [_pooled_row(source, rows) for source, rows in per_source.items()]
    for row in pooled:
        logger.info(
            f"{row.source}: {_fmt(row.translation_rms_mm, 3)} ± {_fmt(row.translation_std_mm, 3)} mm "
            f"over {row.pose_count} poses"
        )
    return ErrorReport(
        rows=pooled,
        sequences=breakdown,
        axis_reference=config.axis_reference,
        angle_floor_deg=config.angle_floor_deg,
    )


def _fmt(value: float | None, digits: int) -> str:
    return "n/a" if value is None or not np.isfinite(value) else f"{value:.{digits}f}"


def format_table(report: ErrorReport, fmt: str = "text") -> str:
    """Render the pooled rows (and the per-sequence breakdown) as an aligned table or CSV."""
    header = [
        "sequence",
        "source",
        "translation_rms_mm",
        "translation_std_mm",
        "axis_mean_deg",
        "axis_std_deg",
        "geodesic_mean_deg",
        "geodesic_std_deg",
        "poses",
        "lost",
    ]
    lines: list[tuple[str, SourceErrorRow]] = [("all", r) for r in report.rows]
    if len(report.sequences) > 1:
        lines += [(s.sequence, r) for s in report.sequences for r in s.rows]

    if fmt == "csv":
        out = io.StringIO()
        out.write(",".join(header) + "\n")
        for sequence, r in lines:
            values = [
                sequence,
                r.source,
                _fmt(r.translation_rms_mm, 6),
                _fmt(r.translation_std_mm, 6),
                _fmt(r.axis_deviation_mean_deg, 6),
                _fmt(r.axis_deviation_std_deg, 6),
                _fmt(r.geodesic_mean_deg, 6),
                _fmt(r.geodesic_std_deg, 6),
                str(r.pose_count),
                str(r.lost_count),
            ]
            out.write(",".join(values) + "\n")
        return out.getvalue()
    if fmt != "text":
        raise InsideOutError(code=ErrorCode.INVALID_INPUT, message=f"Unknown table format '{fmt}'")

    rows = [["sequence", "source", "translation (mm)", "axis deviation (deg)", "geodesic (deg)", "poses", "lost"]]
    for sequence, r in lines:
        rows.append(
            [
                sequence,
                r.source,
                f"{_fmt(r.translation_rms_mm, 2)} ± {_fmt(r.translation_std_mm, 2)}",
                f"{_fmt(r.axis_deviation_mean_deg, 2)} ± {_fmt(r.axis_deviation_std_deg, 2)}",
                f"{_fmt(r.geodesic_mean_deg, 2)} ± {_fmt(r.geodesic_std_deg, 2)}",
                str(r.pose_count),
                str(r.lost_count),
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows) + "\n"
