"""track: stereo visual odometry over a recorded observation stream."""

import logging
from pathlib import Path
from typing import Any

from insideout import formats
from insideout.commands import build_rig, relative
from insideout.models.config import ExperimentConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.usfuse import TimedPoseStream
from insideout.vostereo import track_sequence

logger = logging.getLogger(__name__)


def run_track(config: ExperimentConfig, observations: Path, output: Path, seed: int, source: str = "vo") -> dict[str, Any]:
    """
    Track an observation CSV and write the camera trajectory plus session statistics.

    Lost frames are left out of the written stream; evaluation counts them as lost.
    """
    frames = formats.read_observations(observations)
    rig = build_rig(config.camera, config.calibration)
    session = track_sequence(rig, frames, config=config.tracking, seed=seed)

    tracked = session.tracked_entries()
    if not tracked:
        raise InsideOutError(code=ErrorCode.EMPTY_INPUT, message="No frame was tracked")
    stream = TimedPoseStream(source, [e.timestamp for e in tracked], [e.pose for e in tracked])

    output.mkdir(parents=True, exist_ok=True)
    trajectory = formats.write_pose_stream(output / f"{source}.csv", stream)
    stats = session.statistics()
    lost_times = [e.timestamp for e in session.trajectory if e.lost]
    session_file = formats.write_yaml(
        output / f"{source}_session.yaml",
        {**stats.model_dump(mode="json"), "lost_timestamps_s": lost_times, "status": session.status.value},
    )
    return {
        "trajectory": relative(trajectory, output),
        "session": relative(session_file, output),
        **stats.model_dump(mode="json"),
    }
