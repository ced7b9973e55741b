"""simulate: scene, ground truth, sensor streams, calibration problems and ultrasound sweep."""

import logging
from pathlib import Path
from typing import Any

import numpy as np

from insideout import formats
from insideout.bench import FrameChainSpec, anchor_from_ground_truth
from insideout.commands import build_rig, relative
from insideout.models.config import ExperimentConfig, SequenceConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.optics import StereoRig
from insideout.orsim import (
    NoiseModel,
    RigSetup,
    Scene,
    StereoRenderer,
    UsImageSpec,
    generate_scene,
    generate_trajectory,
    generate_us_sweep,
    simulate_hand_eye_problem,
    simulate_marker_tracking,
    simulate_ots,
    simulate_planar_views,
    simulate_stylus_problem,
)
from insideout.usfuse import TimedPoseStream

logger = logging.getLogger(__name__)


def chain_spec_for(rig_setup: RigSetup) -> FrameChainSpec:
    """Chain spec holding the static rig transforms; anchors are added per sequence."""
    return FrameChainSpec(
        t_ee_rgb=rig_setup.t_ee_rgb,
        t_rgb_stereo=rig_setup.t_rgb_stereo,
        t_rb_ots=rig_setup.t_rb_ots,
        t_ee_marker=rig_setup.t_ee_marker,
    )


def _write_scene(output: Path, scene: Scene) -> None:
    formats.write_landmarks(output / "landmarks.csv", scene.ids, scene.positions)
    formats.write_yaml(
        output / "scene.yaml",
        {
            "seed": scene.seed,
            "landmarks": len(scene),
            "bounds_min_mm": scene.bounds_min.tolist(),
            "bounds_max_mm": scene.bounds_max.tolist(),
            "markers": [
                {"id": m.marker_id, "size_mm": m.size_mm, "pose": formats.transform_to_list(m.pose)}
                for m in scene.markers
            ],
        },
    )


def _write_rig(output: Path, config: ExperimentConfig, rig_setup: RigSetup) -> None:
    camera = config.camera
    formats.write_yaml(
        output / "rig.yaml",
        {
            "camera": camera.model_dump(mode="json"),
            "t_ee_rgb": formats.transform_to_list(rig_setup.t_ee_rgb),
            "t_rgb_stereo": formats.transform_to_list(rig_setup.t_rgb_stereo),
            "t_rb_ots": formats.transform_to_list(rig_setup.t_rb_ots),
            "t_ee_marker": formats.transform_to_list(rig_setup.t_ee_marker),
            "t_rgb_us": formats.transform_to_list(rig_setup.t_rgb_us),
        },
    )


def simulate_sequence(
    config: ExperimentConfig,
    sequence: SequenceConfig,
    index: int,
    scene: Scene,
    rig: StereoRig,
    rig_setup: RigSetup,
    noise: NoiseModel,
    seed: int,
    renderer: StereoRenderer,
    output: Path,
) -> dict[str, Any]:
    """Write ground truth, stereo observations, tracker streams and the chain spec of one sequence."""
    directory = output / sequence.name
    ground_truth = generate_trajectory(
        sequence.kind,
        n_samples=sequence.n_samples,
        rate_hz=config.camera.rate_hz,
        seed=seed * 100 + index,
        extent_mm=sequence.extent_mm,
        pan_deg=sequence.pan_deg,
    )
    formats.write_pose_stream(directory / "ground_truth.csv", ground_truth)

    stereo_poses = [rig_setup.stereo_camera(ee) for ee in ground_truth.poses]
    frames = [
        (float(t), renderer.render(i, pose))
        for i, (t, pose) in enumerate(zip(ground_truth.timestamps, stereo_poses))
    ]
    formats.write_observations(directory / "observations.csv", frames)

    ots = simulate_ots(ground_truth, rig_setup, noise, seed=seed * 100 + index)
    formats.write_pose_stream(directory / "ots.csv", ots)

    spec = chain_spec_for(rig_setup)
    spec.t_rb_ir1_0 = anchor_from_ground_truth(ground_truth, spec)
    spec.anchors["vo"] = spec.t_rb_ir1_0

    streams = ["ots"]
    if scene.markers:
        camera_stream = TimedPoseStream("stereo", ground_truth.timestamps, stereo_poses)
        try:
            aruco = simulate_marker_tracking(scene, camera_stream, rig, noise, seed=seed, sequence_index=index)
        except InsideOutError as e:
            if e.code != ErrorCode.EMPTY_INPUT:
                raise
            logger.warning(f"Sequence {sequence.name}: no marker visible, marker stream not written")
        else:
            formats.write_pose_stream(directory / "aruco.csv", aruco)
            spec.anchors["aruco"] = anchor_from_ground_truth(ground_truth, spec, aruco.start)
            streams.append("aruco")

    formats.write_chain_spec(directory / "chain.yaml", spec)
    observations = sum(len(f) for _, f in frames)
    logger.info(f"Sequence {sequence.name}: {len(ground_truth)} poses, {observations} observations")
    return {
        "poses": len(ground_truth),
        "observations": observations,
        "streams": streams,
        "directory": relative(directory, output),
    }


def write_calibration_problems(
    config: ExperimentConfig, rig: StereoRig, rig_setup: RigSetup, seed: int, output: Path
) -> dict[str, str]:
    """Planar views, hand-eye pose pairs (both variants) and stylus points."""
    directory = output / "calibration"
    cal = config.calibration
    views = simulate_planar_views(rig.left, cal.n_planar_views, seed=seed, pixel_sigma=config.noise.pixel_sigma)
    written = {"camera": formats.write_planar_views(directory / "planar_views.csv", views)}

    robot, sensor = simulate_hand_eye_problem(
        rig_setup.t_ee_rgb, cal.n_motion_pairs + 1, "eye_on_hand", seed=seed
    )
    written["handeye"] = formats.write_pose_pairs(
        directory / "handeye_eye_on_hand.csv", robot, sensor, comment="variant=eye_on_hand"
    )
    robot, sensor = simulate_hand_eye_problem(
        rig_setup.t_rb_ots, cal.n_motion_pairs + 1, "eye_on_base", seed=seed, t_ee_marker=rig_setup.t_ee_marker
    )
    written["handeye_base"] = formats.write_pose_pairs(
        directory / "handeye_eye_on_base.csv", robot, sensor, comment="variant=eye_on_base"
    )

    us = config.ultrasound
    image = UsImageSpec(width=us.width_px, height=us.height_px, spacing_mm=tuple(us.spacing_mm))
    tips, pixels, probe_poses = simulate_stylus_problem(
        rig_setup.t_rgb_us, image, cal.n_stylus_points, seed=seed, tip_sigma_mm=cal.stylus_noise_mm
    )
    written["us"] = formats.write_stylus_points(
        directory / "stylus.csv",
        tips,
        pixels,
        probe_poses,
        comment=f"spacing_mm={us.spacing_mm[0]!r},{us.spacing_mm[1]!r}",
    )
    return {name: relative(path, output) for name, path in written.items()}


def write_ultrasound_sweep(config: ExperimentConfig, rig_setup: RigSetup, seed: int, output: Path) -> dict[str, Any]:
    directory = output / "ultrasound"
    sweep = generate_us_sweep(config.ultrasound, rig_setup, seed=seed, rate_hz=config.camera.rate_hz)
    frames = formats.write_us_frames(directory, sweep.frames)
    tracking = formats.write_pose_stream(directory / "us_tracking.csv", sweep.rgb_stream)
    calibration = formats.write_yaml(
        directory / "us_calibration.yaml", {"transform": formats.transform_to_list(rig_setup.t_rgb_us)}
    )
    formats.write_yaml(
        directory / "phantom.yaml",
        {
            "center_mm": [float(v) for v in np.asarray(sweep.phantom.center)],
            "radius_mm": sweep.phantom.radius_mm,
            "inside": sweep.phantom.inside,
            "outside": sweep.phantom.outside,
            "iso_threshold": sweep.phantom.iso_threshold,
        },
    )
    return {
        "frames": relative(frames, output),
        "tracking": relative(tracking, output),
        "calibration": relative(calibration, output),
        "count": len(sweep.frames),
    }


def run_simulate(config: ExperimentConfig, output: Path, seed: int) -> dict[str, Any]:
    """
    Generate a full synthetic experiment under ``output``.

    Layout: scene and rig files at the top, one directory per sequence, a
    ``calibration`` directory with one problem file per calibrate subcommand and an
    ``ultrasound`` directory with the compounding inputs.
    """
    output.mkdir(parents=True, exist_ok=True)
    rig = build_rig(config.camera, config.calibration)
    rig_setup = RigSetup.from_config(config.rig)
    noise = NoiseModel.from_config(config.noise)
    scene_config = config.scene
    scene = generate_scene(
        seed,
        bounds=(scene_config.bounds_min_mm, scene_config.bounds_max_mm),
        n_landmarks=scene_config.n_landmarks,
        wall_fraction=scene_config.wall_fraction,
        n_clusters=scene_config.n_clusters,
        cluster_sigma_mm=scene_config.cluster_sigma_mm,
        n_markers=scene_config.n_markers,
        marker_size_mm=scene_config.marker_size_mm,
    )
    _write_scene(output, scene)
    _write_rig(output, config, rig_setup)

    sequences = {}
    for index, sequence in enumerate(config.sequences):
        renderer = StereoRenderer(
            scene,
            rig,
            noise,
            seed=seed,
            sequence_index=index,
            min_depth_mm=config.camera.min_depth_mm,
            max_range_mm=config.camera.max_range_mm,
        )
        sequences[sequence.name] = simulate_sequence(
            config, sequence, index, scene, rig, rig_setup, noise, seed, renderer, output
        )

    summary = {
        "run": config.run.name,
        "seed": seed,
        "landmarks": len(scene),
        "markers": len(scene.markers),
        "total_poses": sum(s["poses"] for s in sequences.values()),
        "sequences": sequences,
        "calibration": write_calibration_problems(config, rig, rig_setup, seed, output),
        "ultrasound": write_ultrasound_sweep(config, rig_setup, seed, output),
    }
    formats.write_yaml(output / "metadata.yaml", summary)
    logger.info(f"Simulated {summary['total_poses']} poses over {len(sequences)} sequences into {output}")
    return summary
