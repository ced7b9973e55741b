"""Fixtures for end-to-end command tests."""

from pathlib import Path
from typing import Any

import pytest

from insideout.commands.simulate import run_simulate
from insideout.config import load_config_from_dict
from insideout.models.config import ExperimentConfig

SEED = 11


def noiseless_experiment() -> dict[str, Any]:
    """Two short noiseless sequences with every sensor on the camera clock."""
    return {
        "run": {"name": "integration", "seed": SEED, "log_level": "warning"},
        "scene": {"n_landmarks": 1500, "n_markers": 6},
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
        "calibration": {"stylus_noise_mm": 0.0},
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


@pytest.fixture(scope="session")
def experiment_config() -> ExperimentConfig:
    return load_config_from_dict(noiseless_experiment())


@pytest.fixture(scope="session")
def simulated(tmp_path_factory: pytest.TempPathFactory, experiment_config: ExperimentConfig) -> Path:
    """Output directory of one simulate run shared by the end-to-end tests."""
    output = tmp_path_factory.mktemp("experiment")
    run_simulate(experiment_config, output, SEED)
    return output
