"""Shared pytest fixtures for all tests."""

from pathlib import Path

import numpy as np
import pytest
import yaml

from insideout.optics import CameraIntrinsics, StereoRig, make_stereo_rig
from insideout.orsim import Scene, generate_scene
from insideout.xform import RigidTransform


@pytest.fixture
def sample_config_dict() -> dict:
    """Small experiment: two short sequences, small room, coarse ultrasound sweep."""
    return {
        "run": {"name": "test-run", "seed": 11, "log_level": "warning"},
        "scene": {
            "n_landmarks": 600,
            "n_markers": 6,
        },
        "sequences": [
            {"name": "seq01", "kind": "sweep", "n_samples": 60, "extent_mm": 300.0},
            {"name": "seq02", "kind": "rotation_only", "n_samples": 45, "pan_deg": 20.0},
        ],
        "noise": {
            "pixel_sigma": 0.0,
            "detection_prob": 1.0,
            "ots_trans_sigma": 0.0,
            "ots_rot_sigma": 0.0,
            "ots_latency": 0.0,
            "ots_rate": 30.0,
            "marker_pixel_sigma": 0.0,
        },
        "tracking": {"min_init_landmarks": 20},
        "ultrasound": {
            "width_px": 80,
            "height_px": 80,
            "spacing_mm": [0.6, 0.6],
            "phantom_radius_mm": 12.0,
            "sweep_frames": 60,
            "sweep_span_mm": 36.0,
            "volume": {"dims": [60, 60, 60], "spacing_mm": 0.8},
        },
    }


@pytest.fixture
def minimal_config_dict() -> dict:
    """Minimal valid configuration; everything else defaults."""
    return {"run": {"name": "minimal"}}


@pytest.fixture
def tmp_config_file(tmp_path: Path, sample_config_dict: dict) -> Path:
    """Create a temporary config file."""
    config_file = tmp_path / "config.yaml"
    with open(config_file, "w") as f:
        yaml.dump(sample_config_dict, f)

    return config_file


@pytest.fixture
def camera() -> CameraIntrinsics:
    """Default 640x480 pinhole camera without distortion."""
    return CameraIntrinsics(fx=615.0, fy=615.0, cx=320.0, cy=240.0)


@pytest.fixture
def distorted_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=600.0, fy=605.0, cx=318.0, cy=242.0, k1=-0.12, k2=0.03)


@pytest.fixture
def rig() -> StereoRig:
    """Rectified 50 mm stereo rig."""
    return make_stereo_rig()


@pytest.fixture
def room_scene() -> Scene:
    """Seeded room with landmarks on the walls and inside."""
    return generate_scene(3, n_landmarks=1500, n_markers=4)


@pytest.fixture
def front_points() -> np.ndarray:
    """Points spread 1-3 m in front of a camera at the origin looking along +z."""
    rng = np.random.default_rng(5)
    n = 200
    z = rng.uniform(1000.0, 3000.0, n)
    x = rng.uniform(-0.4, 0.4, n) * z
    y = rng.uniform(-0.3, 0.3, n) * z
    return np.column_stack([x, y, z])


def random_transform(rng: np.random.Generator, max_angle: float = np.pi, max_offset: float = 500.0) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform.from_rotvec(axis * rng.uniform(0.0, max_angle), rng.uniform(-max_offset, max_offset, 3))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def random_pose(rng: np.random.Generator):
    """Factory for seeded random rigid transforms."""

    def make(max_angle: float = np.pi, max_offset: float = 500.0) -> RigidTransform:
        return random_transform(rng, max_angle, max_offset)

    return make
