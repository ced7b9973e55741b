"""CLI command implementations; each returns a summary dict printed by the dispatcher."""

from pathlib import Path

from insideout.models.config import CalibrationConfig, CameraConfig
from insideout.optics import StereoRig, make_stereo_rig


def build_rig(camera: CameraConfig, calibration: CalibrationConfig | None = None) -> StereoRig:
    """Stereo rig described by the camera section, undistorting with the calibration settings."""
    calibration = calibration or CalibrationConfig()
    return make_stereo_rig(
        fx=camera.fx,
        fy=camera.fy,
        cx=camera.cx,
        cy=camera.cy,
        k1=camera.k1,
        k2=camera.k2,
        width=camera.width,
        height=camera.height,
        baseline_mm=camera.baseline_mm,
        undistort_max_iterations=calibration.undistort_max_iterations,
        undistort_tolerance=calibration.undistort_tolerance,
    )


def relative(path: Path, root: Path) -> str:
    """Path as written into summaries; relative to the output directory when inside it."""
    try:
        return str(path.relative_to(root))
    except ValueError:
        return str(path)
