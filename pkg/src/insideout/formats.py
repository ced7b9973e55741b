"""Readers and writers for every file the commands exchange.

Numeric CSV files carry ``#`` comment lines, one column-header line, and rows written
with 17 significant digits so values survive a write/read cycle unchanged. Structured
metadata is YAML with sorted keys. Bulk image and voxel data are raw little-endian
arrays next to a YAML sidecar.
"""

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
import yaml
from pydantic import BaseModel, ValidationError

from insideout.bench import CHAIN_FIELDS, FrameChainSpec
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.models.reports import VolumeMetadata
from insideout.optics import PlanarView
from insideout.usfuse import TimedPoseStream, UsFrame, VolumeSpec, VoxelVolume
from insideout.vostereo import FeatureObservation
from insideout.xform import RigidTransform

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

POSE_COLUMNS = ("timestamp_s", "tx_mm", "ty_mm", "tz_mm", "qw", "qx", "qy", "qz")
OBSERVATION_COLUMNS = ("frame", "timestamp_s", "feature_id", "ul", "vl", "ur", "vr", "outlier")
PLANAR_COLUMNS = ("view_id", "grid_x_mm", "grid_y_mm", "u_px", "v_px")
RECORD_COLUMNS = ("tx", "ty", "tz", "qw", "qx", "qy", "qz")
POSE_PAIR_COLUMNS = tuple(f"a_{c}" for c in RECORD_COLUMNS) + tuple(f"b_{c}" for c in RECORD_COLUMNS)
STYLUS_COLUMNS = ("tip_x", "tip_y", "tip_z", "u_px", "v_px") + tuple(f"probe_{c}" for c in RECORD_COLUMNS)
LANDMARK_COLUMNS = ("feature_id", "x_mm", "y_mm", "z_mm")

SOURCE_PREFIX = "# insideout pose stream source="


def _format_error(path: Path, message: str, **details: Any) -> InsideOutError:
    return InsideOutError(
        code=ErrorCode.FILE_FORMAT,
        message=f"{path}: {message}",
        details={"path": str(path), **details},
    )


def _number(value: float) -> str:
    return f"{float(value):.17g}"


def write_table(
    path: str | Path,
    columns: Sequence[str],
    rows: np.ndarray,
    comments: Sequence[str] = (),
    integer_columns: Sequence[int] = (),
) -> Path:
    """Write a numeric CSV table; ``integer_columns`` are written without a decimal part."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(rows, dtype=float).reshape(-1, len(columns))
    ints = set(integer_columns)
    lines = [f"# {c}" if not c.startswith("#") else c for c in comments]
    lines.append(",".join(columns))
    for row in data:
        lines.append(",".join(str(int(v)) if i in ints else _number(v) for i, v in enumerate(row)))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_table(path: str | Path, columns: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """
    Read a numeric CSV table written by ``write_table``.

    Returns:
        (rows as an (N, len(columns)) float array, comment lines)

    Raises:
        InsideOutError: FILE_FORMAT for a missing file, a wrong header or a bad row
    """
    path = Path(path)
    if not path.exists():
        raise _format_error(path, "file not found")
    comments: list[str] = []
    body: list[str] = []
    header: str | None = None
    for line in path.read_text().splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped)
        elif header is None:
            header = stripped
        else:
            body.append(stripped)

    expected = ",".join(columns)
    if header != expected:
        raise _format_error(path, f"expected header '{expected}', found '{header}'")
    if not body:
        return np.zeros((0, len(columns))), comments
    try:
        data = np.loadtxt(body, delimiter=",", dtype=float, ndmin=2)
    except ValueError as e:
        raise _format_error(path, f"malformed row: {e}") from e
    if data.shape[1] != len(columns):
        raise _format_error(path, f"expected {len(columns)} columns, found {data.shape[1]}")
    return data, comments


# Pose streams


def write_pose_stream(path: str | Path, stream: TimedPoseStream) -> Path:
    path = write_table(path, POSE_COLUMNS, stream.records(), comments=[f"{SOURCE_PREFIX}{stream.source}"])
    logger.debug(f"Wrote {len(stream)} poses of '{stream.source}' to {path}")
    return path


def read_pose_stream(path: str | Path, source: str | None = None) -> TimedPoseStream:
    """
    Read a pose stream CSV.

    The source tag comes from ``source``, else from the header comment, else from the
    file stem.
    """
    path = Path(path)
    data, comments = read_table(path, POSE_COLUMNS)
    if source is None:
        tags = [c[len(SOURCE_PREFIX) :].strip() for c in comments if c.startswith(SOURCE_PREFIX)]
        source = tags[0] if tags else path.stem
    if len(data) == 0:
        raise _format_error(path, "pose stream has no rows")
    try:
        return TimedPoseStream.from_records(source, data)
    except InsideOutError as e:
        e.details.setdefault("path", str(path))
        raise


# Observations


def write_observations(path: str | Path, frames: Sequence[tuple[float, Sequence[FeatureObservation]]]) -> Path:
    rows = []
    for index, (timestamp, observations) in enumerate(frames):
        for obs in observations:
            right = obs.px_right if obs.px_right is not None else (np.nan, np.nan)
            rows.append(
                [index, timestamp, obs.feature_id, obs.px_left[0], obs.px_left[1], right[0], right[1], int(obs.outlier)]
            )
    data = np.array(rows, dtype=float).reshape(-1, len(OBSERVATION_COLUMNS))
    return write_table(path, OBSERVATION_COLUMNS, data, integer_columns=(0, 2, 7))


def read_observations(path: str | Path) -> list[tuple[float, list[FeatureObservation]]]:
    """Frames in file order; a frame with no observations is absent from the file."""
    path = Path(path)
    data, _ = read_table(path, OBSERVATION_COLUMNS)
    frames: list[tuple[float, list[FeatureObservation]]] = []
    current = None
    for row in data:
        frame = int(row[0])
        if frame != current:
            if current is not None and frame < current:
                raise _format_error(path, f"frame index {frame} after {current}")
            frames.append((float(row[1]), []))
            current = frame
        right = None if np.isnan(row[5]) or np.isnan(row[6]) else np.array(row[5:7])
        frames[-1][1].append(
            FeatureObservation(
                feature_id=int(row[2]),
                px_left=np.array(row[3:5]),
                px_right=right,
                outlier=bool(row[7]),
            )
        )
    return frames


# Calibration problems


def write_planar_views(path: str | Path, views: Sequence[PlanarView]) -> Path:
    rows = [
        [k, g[0], g[1], p[0], p[1]]
        for k, view in enumerate(views)
        for g, p in zip(view.grid_points, view.image_points)
    ]
    return write_table(path, PLANAR_COLUMNS, np.array(rows, dtype=float), integer_columns=(0,))


def read_planar_views(path: str | Path) -> list[PlanarView]:
    data, _ = read_table(path, PLANAR_COLUMNS)
    views = []
    for view_id in dict.fromkeys(int(v) for v in data[:, 0]):
        rows = data[data[:, 0] == view_id]
        views.append(PlanarView(grid_points=rows[:, 1:3], image_points=rows[:, 3:5]))
    return views


def write_pose_pairs(
    path: str | Path, first: Sequence[RigidTransform], second: Sequence[RigidTransform], comment: str = ""
) -> Path:
    """Two poses per line; used for motion pairs and for absolute (robot, sensor) pose pairs."""
    if len(first) != len(second):
        raise InsideOutError(code=ErrorCode.LENGTH_MISMATCH, message="Pose pair lists differ in length")
    rows = np.array([np.concatenate([a.to_record(), b.to_record()]) for a, b in zip(first, second)])
    return write_table(path, POSE_PAIR_COLUMNS, rows, comments=[comment] if comment else [])


def read_pose_pairs(path: str | Path) -> tuple[list[RigidTransform], list[RigidTransform], list[str]]:
    data, comments = read_table(path, POSE_PAIR_COLUMNS)
    first = [RigidTransform.from_record(r[:7]) for r in data]
    second = [RigidTransform.from_record(r[7:]) for r in data]
    return first, second, comments


def write_stylus_points(
    path: str | Path, tips: np.ndarray, pixels: np.ndarray, probe_poses: Sequence[RigidTransform], comment: str = ""
) -> Path:
    rows = np.column_stack([np.asarray(tips), np.asarray(pixels), np.array([p.to_record() for p in probe_poses])])
    return write_table(path, STYLUS_COLUMNS, rows, comments=[comment] if comment else [])


def read_stylus_points(path: str | Path) -> tuple[np.ndarray, np.ndarray, list[RigidTransform], list[str]]:
    data, comments = read_table(path, STYLUS_COLUMNS)
    return data[:, 0:3], data[:, 3:5], [RigidTransform.from_record(r[5:12]) for r in data], comments


def comment_values(comments: Sequence[str]) -> dict[str, str]:
    """Parse ``# key=value`` comment lines."""
    values = {}
    for comment in comments:
        text = comment.lstrip("#").strip()
        if "=" in text:
            key, value = text.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def write_landmarks(path: str | Path, ids: np.ndarray, positions: np.ndarray) -> Path:
    rows = np.column_stack([np.asarray(ids, dtype=float), np.asarray(positions)])
    return write_table(path, LANDMARK_COLUMNS, rows, integer_columns=(0,))


# YAML metadata


def write_yaml(path: str | Path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data, sort_keys=True, default_flow_style=None))
    return path


def read_yaml(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise _format_error(path, "file not found")
    try:
        return yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise _format_error(path, f"invalid YAML: {e}") from e


def write_model(path: str | Path, model: BaseModel) -> Path:
    return write_yaml(path, model.model_dump(mode="json"))


def read_model(path: str | Path, model_type: type[M]) -> M:
    data = read_yaml(path)
    try:
        return model_type.model_validate(data)
    except ValidationError as e:
        raise _format_error(Path(path), f"does not match {model_type.__name__}: {e}") from e


def transform_to_list(transform: RigidTransform) -> list[float]:
    return [float(v) for v in transform.to_record()]


def transform_from_value(value: Any, path: Path, key: str) -> RigidTransform:
    if not isinstance(value, list | tuple) or len(value) != 7:
        raise _format_error(path, f"'{key}' must be a list of 7 numbers (tx, ty, tz, qw, qx, qy, qz)")
    try:
        return RigidTransform.from_record(float(v) for v in value)
    except (TypeError, ValueError) as e:
        raise _format_error(path, f"'{key}' is not numeric: {e}") from e


def read_transform(path: str | Path, key: str = "transform") -> RigidTransform:
    """Read a transform from a YAML file holding ``key: [tx, ty, tz, qw, qx, qy, qz]``."""
    path = Path(path)
    data = read_yaml(path)
    if not isinstance(data, dict) or key not in data:
        raise _format_error(path, f"missing '{key}'")
    return transform_from_value(data[key], path, key)


def write_chain_spec(path: str | Path, spec: FrameChainSpec) -> Path:
    data: dict[str, Any] = {}
    for name in CHAIN_FIELDS:
        value = getattr(spec, name)
        if value is not None:
            data[name] = transform_to_list(value)
    if spec.anchors:
        data["anchors"] = {source: transform_to_list(t) for source, t in spec.anchors.items()}
    return write_yaml(path, data)


def read_chain_spec(path: str | Path) -> FrameChainSpec:
    """Missing transforms stay None; evaluation reports them as an incomplete chain."""
    path = Path(path)
    data = read_yaml(path) or {}
    if not isinstance(data, dict):
        raise _format_error(path, "chain spec must be a mapping")
    unknown = set(data) - set(CHAIN_FIELDS) - {"anchors"}
    if unknown:
        raise _format_error(path, f"unknown chain entries: {sorted(unknown)}")
    values = {name: transform_from_value(data[name], path, name) for name in CHAIN_FIELDS if name in data}
    anchors = {
        str(source): transform_from_value(value, path, f"anchors.{source}")
        for source, value in (data.get("anchors") or {}).items()
    }
    return FrameChainSpec(**values, anchors=anchors)


# Ultrasound frames


def write_us_frames(directory: str | Path, frames: Sequence[UsFrame], name: str = "us_frames") -> Path:
    """Raw uint8 stack (frames, height, width) plus ``<name>.yaml``; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not frames:
        raise InsideOutError(code=ErrorCode.EMPTY_INPUT, message="No ultrasound frames to write")
    height, width = frames[0].pixels.shape
    stack = np.stack([np.asarray(f.pixels, dtype=np.uint8) for f in frames])
    raw = directory / f"{name}.raw"
    stack.tofile(raw)
    return write_yaml(
        directory / f"{name}.yaml",
        {
            "data_file": raw.name,
            "frames": len(frames),
            "width": int(width),
            "height": int(height),
            "spacing_mm": [float(s) for s in frames[0].spacing_mm],
            "timestamps": [float(f.timestamp) for f in frames],
        },
    )


def read_us_frames(sidecar: str | Path) -> list[UsFrame]:
    sidecar = Path(sidecar)
    meta = read_yaml(sidecar)
    try:
        raw = sidecar.parent / meta["data_file"]
        count, height, width = int(meta["frames"]), int(meta["height"]), int(meta["width"])
        spacing = (float(meta["spacing_mm"][0]), float(meta["spacing_mm"][1]))
        timestamps = [float(t) for t in meta["timestamps"]]
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise _format_error(sidecar, f"incomplete ultrasound sidecar: {e}") from e
    if not raw.exists():
        raise _format_error(raw, "file not found")
    data = np.fromfile(raw, dtype=np.uint8)
    if data.size != count * height * width or len(timestamps) != count:
        raise _format_error(raw, f"expected {count} frames of {height}x{width}", size=int(data.size))
    stack = data.reshape(count, height, width)
    return [UsFrame(timestamp=t, pixels=stack[i], spacing_mm=spacing) for i, t in enumerate(timestamps)]


# Volumes


def write_volume(directory: str | Path, volume: VoxelVolume, name: str = "volume") -> Path:
    """Means and weights as float32 little-endian with x fastest; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    volume.mean().ravel(order="F").astype("<f4").tofile(directory / f"{name}.raw")
    volume.weight.ravel(order="F").astype("<f4").tofile(directory / f"{name}_weights.raw")
    meta = VolumeMetadata(
        dims=volume.spec.dims,
        spacing_mm=volume.spec.spacing_mm,
        origin_mm=volume.spec.origin_mm,
        orientation=transform_to_list(volume.spec.orientation),
        frames_used=volume.frames_used,
        frames_skipped=volume.frames_skipped,
        filled_voxels=int(np.count_nonzero(volume.filled())),
    )
    path = write_model(directory / f"{name}.yaml", meta)
    logger.info(f"Wrote volume {volume.spec.dims} to {directory / name}.raw")
    return path


def read_volume(sidecar: str | Path) -> VoxelVolume:
    """Volume with value_sum = mean * weight, so ``mean()`` returns the stored means."""
    sidecar = Path(sidecar)
    meta = read_model(sidecar, VolumeMetadata)
    stem = sidecar.with_suffix("")
    arrays = []
    for raw in (stem.with_name(f"{stem.name}.raw"), stem.with_name(f"{stem.name}_weights.raw")):
        if not raw.exists():
            raise _format_error(raw, "file not found")
        data = np.fromfile(raw, dtype="<f4").astype(float)
        if data.size != int(np.prod(meta.dims)):
            raise _format_error(raw, f"expected {int(np.prod(meta.dims))} voxels, found {data.size}")
        arrays.append(data.reshape(meta.dims, order="F"))
    mean, weight = arrays
    spec = VolumeSpec(
        dims=meta.dims,
        spacing_mm=meta.spacing_mm,
        origin_mm=meta.origin_mm,
        orientation=transform_from_value(meta.orientation, sidecar, "orientation"),
    )
    return VoxelVolume(
        spec=spec,
        value_sum=mean * weight,
        weight=weight,
        frames_used=meta.frames_used,
        frames_skipped=meta.frames_skipped,
    )
