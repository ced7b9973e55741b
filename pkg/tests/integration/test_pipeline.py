"""End-to-end tests: simulate, then run every command on the simulated files."""

from pathlib import Path

import numpy as np
import pytest

from insideout import formats
from insideout.__main__ import parse_args
from insideout.app import main
from insideout.commands.calibration import run_calibrate_camera, run_calibrate_handeye, run_calibrate_us
from insideout.commands.evaluation import read_report, run_evaluate
from insideout.commands.simulate import run_simulate
from insideout.commands.tracking import run_track
from insideout.commands.volume import run_compound, run_sync
from insideout.config import load_config_from_dict
from insideout.models.config import ExperimentConfig
from insideout.orsim import perturb_stream
from insideout.xform import RigidTransform, geodesic_angle

from .conftest import SEED, noiseless_experiment


class TestSimulateOutput:
    """Tests for the simulated experiment layout."""

    def test_layout(self, simulated: Path):
        """Test that every command input is written."""
        for name in (
            "metadata.yaml",
            "scene.yaml",
            "rig.yaml",
            "landmarks.csv",
            "seq01/ground_truth.csv",
            "seq01/observations.csv",
            "seq01/ots.csv",
            "seq01/chain.yaml",
            "seq02/ground_truth.csv",
            "calibration/planar_views.csv",
            "calibration/handeye_eye_on_hand.csv",
            "calibration/handeye_eye_on_base.csv",
            "calibration/stylus.csv",
            "ultrasound/us_frames.yaml",
            "ultrasound/us_tracking.csv",
            "ultrasound/us_calibration.yaml",
        ):
            assert (simulated / name).exists(), name

    def test_metadata(self, simulated: Path):
        """Test the run summary."""
        metadata = formats.read_yaml(simulated / "metadata.yaml")
        assert metadata["seed"] == SEED
        assert metadata["total_poses"] == 105
        assert metadata["sequences"]["seq02"]["poses"] == 45

    def test_deterministic(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test that the same seed writes byte-identical files."""
        run_simulate(experiment_config, tmp_path, SEED)
        for name in ("seq01/ground_truth.csv", "seq01/observations.csv", "seq01/ots.csv", "metadata.yaml"):
            assert (tmp_path / name).read_bytes() == (simulated / name).read_bytes(), name


class TestEvaluatePipeline:
    """Tests for evaluation over simulated sequences."""

    def test_ots_chain_closes(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test that noiseless OTS data evaluates to zero error."""
        summary = run_evaluate(experiment_config, None, None, [], tmp_path, experiment=simulated)
        report = read_report(tmp_path / "report.json")
        ots = next(r for r in report.rows if r.source == "ots")
        assert ots.translation_rms_mm < 1e-6
        assert ots.geodesic_mean_deg < 1e-6
        assert ots.pose_count == 105
        assert ots.lost_count == 0
        assert [s.sequence for s in report.sequences] == ["seq01", "seq02"]
        assert "ots" in summary["text"]

    def test_explicit_files(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test evaluation of one sequence given file paths."""
        seq = simulated / "seq01"
        summary = run_evaluate(
            experiment_config, seq / "ground_truth.csv", seq / "chain.yaml", [seq / "ots.csv"], tmp_path, fmt="csv"
        )
        assert summary["table"] == "report.csv"
        assert summary["text"].splitlines()[1].startswith("all,ots,")

    @pytest.mark.slow
    def test_tracked_sequence(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test that visual odometry on noiseless observations matches ground truth."""
        seq = simulated / "seq01"
        track = run_track(experiment_config, seq / "observations.csv", tmp_path, seed=SEED)
        assert track["frames_lost"] == 0
        run_evaluate(
            experiment_config,
            seq / "ground_truth.csv",
            seq / "chain.yaml",
            [tmp_path / "vo.csv"],
            tmp_path / "report",
        )
        vo = read_report(tmp_path / "report" / "report.json").rows[0]
        assert vo.source == "vo"
        assert vo.translation_rms_mm <= 1e-6
        assert vo.axis_deviation_deg
        assert max(vo.axis_deviation_deg) <= 1e-6
        assert vo.lost_count == 0


class TestCalibratePipeline:
    """Tests for the calibration commands on simulated problems."""

    def test_handeye(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test eye-on-hand recovery of the end-effector to camera transform."""
        summary = run_calibrate_handeye(experiment_config, simulated / "calibration/handeye_eye_on_hand.csv", tmp_path)
        truth = experiment_config.rig.t_ee_rgb.to_transform()
        estimate = RigidTransform.from_record(summary["transform"])
        assert summary["variant"] == "eye_on_hand"
        np.testing.assert_allclose(estimate.translation, truth.translation, atol=1e-3)
        assert np.degrees(geodesic_angle(estimate.rotation, truth.rotation)) < 1e-4

    def test_handeye_eye_on_base(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test that the variant is read from the problem file."""
        summary = run_calibrate_handeye(experiment_config, simulated / "calibration/handeye_eye_on_base.csv", tmp_path)
        truth = experiment_config.rig.t_rb_ots.to_transform()
        assert summary["variant"] == "eye_on_base"
        np.testing.assert_allclose(summary["transform"][:3], truth.translation, atol=1e-2)

    def test_camera(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test intrinsics from noiseless planar views."""
        summary = run_calibrate_camera(experiment_config, simulated / "calibration/planar_views.csv", tmp_path)
        assert summary["fx"] == pytest.approx(615.0, rel=1e-4)
        assert summary["cy"] == pytest.approx(240.0, abs=0.1)
        assert (tmp_path / "intrinsics.yaml").exists()

    def test_ultrasound(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test the image-to-probe transform from stylus points."""
        summary = run_calibrate_us(experiment_config, simulated / "calibration/stylus.csv", tmp_path)
        truth = experiment_config.rig.t_rgb_us.to_transform()
        assert summary["pixel_spacing_mm"] == [0.6, 0.6]
        np.testing.assert_allclose(summary["transform"][:3], truth.translation, atol=1.0)
        assert summary["fre_mm"] < 0.5


class TestSyncPipeline:
    """Tests for latency estimation through files."""

    def test_recovers_tracker_latency(self, tmp_path: Path):
        """Test that a 30 ms OTS latency is found and removed."""
        config_dict = noiseless_experiment()
        config_dict["noise"]["ots_latency"] = 0.030
        config_dict["sequences"] = [{"name": "seq01", "kind": "freehand", "n_samples": 300, "extent_mm": 400.0}]
        config_dict["scene"]["n_landmarks"] = 50
        config = load_config_from_dict(config_dict)
        run_simulate(config, tmp_path / "sim", SEED)
        seq = tmp_path / "sim/seq01"
        summary = run_sync(config, seq / "ground_truth.csv", seq / "ots.csv", tmp_path / "sync")
        assert summary["offset_s"] == pytest.approx(0.030, abs=3e-3)
        synced = formats.read_pose_stream(tmp_path / "sync/ots_synced.csv")
        original = formats.read_pose_stream(seq / "ots.csv")
        assert synced.start == pytest.approx(original.start - summary["offset_s"])


class TestCompoundPipeline:
    """Tests for compounding the simulated sweep."""

    @pytest.mark.slow
    def test_sphere_recovered(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test that the phantom radius is recovered from the compounded volume."""
        us = simulated / "ultrasound"
        summary = run_compound(
            experiment_config, us / "us_frames.yaml", us / "us_tracking.csv", us / "us_calibration.yaml", tmp_path
        )
        assert summary["frames_used"] == 60
        assert summary["frames_skipped"] == 0
        assert summary["radius_mm"] == pytest.approx(12.0, abs=0.5)
        phantom = formats.read_yaml(us / "phantom.yaml")
        np.testing.assert_allclose(summary["center_mm"], phantom["center_mm"], atol=0.5)
        volume = formats.read_volume(tmp_path / "volume.yaml")
        assert volume.spec.dims == (60, 60, 60)

    @pytest.mark.slow
    def test_pose_noise_raises_fit_residual(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test that 1 mm / 1° tracking noise blurs the compounded sphere."""
        us = simulated / "ultrasound"
        clean = run_compound(
            experiment_config, us / "us_frames.yaml", us / "us_tracking.csv", us / "us_calibration.yaml", tmp_path / "clean"
        )
        noisy_tracking = perturb_stream(formats.read_pose_stream(us / "us_tracking.csv"), 1.0, 1.0, SEED)
        formats.write_pose_stream(tmp_path / "noisy_tracking.csv", noisy_tracking)
        noisy = run_compound(
            experiment_config,
            us / "us_frames.yaml",
            tmp_path / "noisy_tracking.csv",
            us / "us_calibration.yaml",
            tmp_path / "noisy",
        )
        assert noisy["rms_residual_mm"] > 2.0 * clean["rms_residual_mm"]
        assert noisy["rms_residual_mm"] > 0.2


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestDeterminism:
    """Tests that repeated command runs write byte-identical files."""

    @pytest.mark.slow
    def test_track(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test the tracking outputs."""
        observations = simulated / "seq01/observations.csv"
        run_track(experiment_config, observations, tmp_path / "a", seed=SEED)
        run_track(experiment_config, observations, tmp_path / "b", seed=SEED)
        first = tree_bytes(tmp_path / "a")
        assert "vo.csv" in first
        assert first == tree_bytes(tmp_path / "b")

    def test_calibrate(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test the hand-eye, camera and ultrasound calibration outputs."""
        for out in ("a", "b"):
            run_calibrate_handeye(experiment_config, simulated / "calibration/handeye_eye_on_hand.csv", tmp_path / out)
            run_calibrate_camera(experiment_config, simulated / "calibration/planar_views.csv", tmp_path / out)
            run_calibrate_us(experiment_config, simulated / "calibration/stylus.csv", tmp_path / out)
        first = tree_bytes(tmp_path / "a")
        assert "intrinsics.yaml" in first
        assert first == tree_bytes(tmp_path / "b")

    @pytest.mark.slow
    def test_compound(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test the volume and sphere-fit outputs."""
        us = simulated / "ultrasound"
        for out in ("a", "b"):
            run_compound(
                experiment_config, us / "us_frames.yaml", us / "us_tracking.csv", us / "us_calibration.yaml", tmp_path / out
            )
        first = tree_bytes(tmp_path / "a")
        assert "volume.yaml" in first
        assert first == tree_bytes(tmp_path / "b")

    def test_evaluate(self, simulated: Path, experiment_config: ExperimentConfig, tmp_path: Path):
        """Test the report outputs."""
        for out in ("a", "b"):
            run_evaluate(experiment_config, None, None, [], tmp_path / out, experiment=simulated)
        first = tree_bytes(tmp_path / "a")
        assert "report.json" in first
        assert first == tree_bytes(tmp_path / "b")


class TestCommandLine:
    """Tests for the CLI on simulated files."""

    def test_evaluate_stdout(self, simulated: Path, capsys, tmp_path: Path):
        """Test that the table is printed to stdout."""
        args = parse_args(["-o", str(tmp_path), "--format", "csv", "evaluate", "--experiment", str(simulated)])
        assert main(args) == 0
        out = capsys.readouterr().out
        assert out.startswith("sequence,source,translation_rms_mm")

    def test_incomplete_chain_exit_code(self, simulated: Path, capsys, tmp_path: Path):
        """Test that a chain without the tracker transform fails with exit code 2."""
        chain = tmp_path / "chain.yaml"
        formats.write_yaml(chain, {"t_ee_rgb": [0, 0, 0, 1, 0, 0, 0]})
        seq = simulated / "seq01"
        args = parse_args(
            ["-o", str(tmp_path / "out"), "evaluate", str(seq / "ground_truth.csv"), str(chain), str(seq / "ots.csv")]
        )
        assert main(args) == 2
        assert "error[INCOMPLETE_CHAIN]" in capsys.readouterr().err
