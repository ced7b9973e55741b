"""evaluate: tracker streams against robot ground truth in the joint RGB frame."""

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from insideout import formats
from insideout.bench import SequenceInput, format_table, make_report
from insideout.commands import relative
from insideout.models.config import ExperimentConfig
from insideout.models.errors import ErrorCode, InsideOutError
from insideout.models.reports import ErrorReport

logger = logging.getLogger(__name__)

GROUND_TRUTH_FILE = "ground_truth.csv"
CHAIN_FILE = "chain.yaml"
STREAM_FILES = ("ots.csv", "vo.csv", "aruco.csv")


def load_sequence(name: str, ground_truth: Path, chain: Path, streams: Sequence[Path]) -> SequenceInput:
    if not streams:
        raise InsideOutError(code=ErrorCode.EMPTY_INPUT, message=f"Sequence '{name}' has no tracker streams")
    return SequenceInput(
        name=name,
        ground_truth=formats.read_pose_stream(ground_truth, source="robot"),
        streams=[formats.read_pose_stream(p) for p in streams],
        spec=formats.read_chain_spec(chain),
    )


def discover_sequences(experiment: Path) -> list[SequenceInput]:
    """
    Sequences of an experiment directory.

    Every sub-directory holding ground_truth.csv and chain.yaml is a sequence; its
    streams are the ots, vo and aruco CSV files present.
    """
    sequences = []
    for directory in sorted(p for p in experiment.iterdir() if p.is_dir()):
        gt = directory / GROUND_TRUTH_FILE
        chain = directory / CHAIN_FILE
        if not (gt.exists() and chain.exists()):
            continue
        streams = [directory / f for f in STREAM_FILES if (directory / f).exists()]
        sequences.append(load_sequence(directory.name, gt, chain, streams))
    if not sequences:
        raise InsideOutError(
            code=ErrorCode.EMPTY_INPUT,
            message=f"No sequence directories found under {experiment}",
            details={"path": str(experiment)},
        )
    return sequences


def write_report(report: ErrorReport, output: Path, fmt: str) -> dict[str, Any]:
    output.mkdir(parents=True, exist_ok=True)
    report_json = output / "report.json"
    report_json.write_text(report.model_dump_json(indent=2) + "\n")
    table = format_table(report, fmt)
    table_path = output / ("report.csv" if fmt == "csv" else "report.txt")
    table_path.write_text(table)
    return {"report": relative(report_json, output), "table": relative(table_path, output), "text": table}


def read_report(path: Path) -> ErrorReport:
    if not path.exists():
        raise InsideOutError(code=ErrorCode.FILE_FORMAT, message=f"{path}: file not found", details={"path": str(path)})
    return ErrorReport.model_validate_json(path.read_text())


def run_evaluate(
    config: ExperimentConfig,
    ground_truth: Path | None,
    chain: Path | None,
    streams: Sequence[Path],
    output: Path,
    fmt: str = "text",
    experiment: Path | None = None,
) -> dict[str, Any]:
    """Evaluate one sequence given explicit files, or every sequence of an experiment directory."""
    if experiment is not None:
        sequences = discover_sequences(experiment)
    elif ground_truth is not None and chain is not None:
        sequences = [load_sequence(ground_truth.parent.name or "sequence", ground_truth, chain, streams)]
    else:
        raise InsideOutError(
            code=ErrorCode.INVALID_INPUT,
            message="evaluate needs GT CHAIN STREAM... or --experiment DIR",
        )
    report = make_report(sequences, config.evaluation)
    logger.info(f"Evaluated {len(report.rows)} sources over {len(sequences)} sequences")
    return write_report(report, output, fmt)
