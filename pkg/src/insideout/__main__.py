"""Entry point for the insideout command line."""

import argparse
import sys
from collections.abc import Sequence

from insideout import __version__
from insideout.app import main


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        prog="insideout",
        description="Markerless inside-out tracking: simulation, calibration, tracking, compounding and evaluation",
    )
    parser.add_argument("--seed", type=int, default=None, help="Master seed (default: run.seed of the config)")
    parser.add_argument(
        "--config",
        "-c",
        default=None,
        help="Path to the experiment YAML file (default: built-in defaults)",
    )
    parser.add_argument("--output", "-o", default="output", help="Output directory (default: output)")
    parser.add_argument(
        "--format",
        choices=["text", "csv"],
        default="text",
        help="Format of results printed to stdout and of the evaluation table (default: text)",
    )
    parser.add_argument("--version", "-v", action="version", version=f"insideout {__version__}")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("simulate", help="Generate scene, ground truth, sensor streams and calibration problems")

    track = commands.add_parser("track", help="Run stereo visual odometry over an observation stream")
    track.add_argument("observations", help="Observation CSV")

    calibrate = commands.add_parser("calibrate", help="Solve a calibration problem")
    calibrate.add_argument("kind", choices=["handeye", "camera", "us"])
    calibrate.add_argument("problem", help="Problem CSV")
    calibrate.add_argument(
        "--variant",
        choices=["eye_on_hand", "eye_on_base"],
        default=None,
        help="Hand-eye variant (default: from the problem file)",
    )

    sync = commands.add_parser("sync", help="Estimate the clock offset between two pose streams")
    sync.add_argument("reference", help="Reference pose stream CSV")
    sync.add_argument("target", help="Target pose stream CSV")

    compound = commands.add_parser("compound", help="Compound tracked ultrasound frames into a volume")
    compound.add_argument("frames", help="Ultrasound frame sidecar YAML")
    compound.add_argument("tracking", help="Probe tracking pose stream CSV")
    compound.add_argument("calibration", help="YAML with the image-to-probe transform")
    compound.add_argument(
        "--tracking-offset",
        type=float,
        default=0.0,
        help="Tracking latency in seconds as reported by sync (default: 0, stream already aligned)",
    )

    evaluate = commands.add_parser("evaluate", help="Compare tracker streams against ground truth")
    evaluate.add_argument("ground_truth", nargs="?", help="Ground-truth pose stream CSV")
    evaluate.add_argument("chain", nargs="?", help="Frame chain YAML")
    evaluate.add_argument("streams", nargs="*", help="Tracker pose stream CSVs")
    evaluate.add_argument("--experiment", default=None, help="Evaluate every sequence directory under DIR")

    return parser.parse_args(argv)


def main_sync(argv: Sequence[str] | None = None) -> None:
    """Synchronous entry point."""
    args = parse_args(argv)
    try:
        code = main(args)
    except KeyboardInterrupt:
        code = 130
    sys.exit(code)


if __name__ == "__main__":
    main_sync()
