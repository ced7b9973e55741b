"""Command dispatcher and process-level logging setup."""

import argparse
import io
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any

import yaml
from pydantic_settings import BaseSettings, SettingsConfigDict

from insideout.commands.calibration import run_calibrate_camera, run_calibrate_handeye, run_calibrate_us
from insideout.commands.evaluation import run_evaluate
from insideout.commands.simulate import run_simulate
from insideout.commands.tracking import run_track
from insideout.commands.volume import run_compound, run_sync
from insideout.config import load_config
from insideout.models.config import ExperimentConfig
from insideout.models.errors import InsideOutError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class RuntimeSettings(BaseSettings):
    """Process settings read from INSIDEOUT_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="INSIDEOUT_")

    log_level: str | None = None
    log_file: str | None = None


def configure_logging(level: str = "info", log_file: str | None = None) -> None:
    """
    Configure the root logger once per process.

    Logs go to stderr, and to a rotating file when ``log_file`` is set; stdout is
    reserved for command results.
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)

    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root_logger.addHandler(stderr_handler)

    if log_file:
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=3,
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root_logger.addHandler(file_handler)
        logger.info(f"Logging to file: {log_file}")


def dispatch(args: argparse.Namespace, config: ExperimentConfig, seed: int) -> dict[str, Any]:
    output = Path(args.output)
    command = args.command
    if command == "simulate":
        return run_simulate(config, output, seed)
    if command == "track":
        return run_track(config, Path(args.observations), output, seed)
    if command == "calibrate":
        problem = Path(args.problem)
        if args.kind == "handeye":
            return run_calibrate_handeye(config, problem, output, variant=args.variant)
        if args.kind == "camera":
            return run_calibrate_camera(config, problem, output)
        return run_calibrate_us(config, problem, output)
    if command == "sync":
        return run_sync(config, Path(args.reference), Path(args.target), output)
    if command == "compound":
        return run_compound(
            config,
            Path(args.frames),
            Path(args.tracking),
            Path(args.calibration),
            output,
            tracking_offset_s=args.tracking_offset,
        )
    if command == "evaluate":
        return run_evaluate(
            config,
            Path(args.ground_truth) if args.ground_truth else None,
            Path(args.chain) if args.chain else None,
            [Path(s) for s in args.streams],
            output,
            fmt=args.format,
            experiment=Path(args.experiment) if args.experiment else None,
        )
    raise ValueError(f"Unknown command: {command}")


def render_summary(summary: dict[str, Any], fmt: str) -> str:
    """Command result as YAML (text) or flat ``key,value`` lines (csv)."""
    if "text" in summary:
        return str(summary["text"])
    if fmt == "csv":
        out = io.StringIO()
        out.write("key,value\n")
        for key, value in sorted(summary.items()):
            if not isinstance(value, dict | list):
                out.write(f"{key},{value}\n")
        return out.getvalue()
    return yaml.safe_dump(summary, sort_keys=True)


def main(args: argparse.Namespace) -> int:
    """
    Run one CLI command.

    Returns:
        Exit code: 0 on success, 2 on a toolkit error, 1 on anything unexpected
    """
    settings = RuntimeSettings()
    configure_logging(settings.log_level or "info", settings.log_file)

    try:
        config = load_config(args.config)
        if settings.log_level is None:
            logging.getLogger().setLevel(getattr(logging, config.run.log_level.upper()))
        seed = args.seed if args.seed is not None else config.run.seed
        logger.info(f"Running '{args.command}' with seed {seed}")
        summary = dispatch(args, config, seed)
    except InsideOutError as e:
        logger.debug(f"Error detail: {e.to_detail().model_dump()}")
        print(e.error_line(), file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"Command '{args.command}' failed: {e}", exc_info=True)
        return 1

    sys.stdout.write(render_summary(summary, args.format))
    return 0
