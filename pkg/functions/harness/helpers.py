"""
Experiment orchestration: the ordered stage table and ``run_experiment``.

Each stage takes the validated ``ExperimentConfig`` and returns the fields of its result
payload; the runner wraps them with status and timing, aborts on the first failure and
records every stage it ran in the sqlite ledger.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from datetime import datetime
import json
import logging

import pytz

from db.db_client import init_schema, upsert_many
from functions.attack.cli import stage_attack_sweep, stage_train_pgm
from functions.data.cli import stage_synth_data
from functions.defenses.cli import stage_defend, stage_detect
from functions.downstream.cli import stage_train_downstream
from functions.jscc.cli import stage_train_jscc
from functions.reports.cli import ledger_path, run_id, stage_report
from shared.config import ExperimentConfig
from shared.error_reporting import categorize_stage_errors
from shared.errors import ConfigError, SimulatorError, StageError
from shared.utils import clean_error_message, create_error_response, create_success_response, summarize_results

from .artifacts import RESULT_TABLES, RunPaths, read_rows


logger = logging.getLogger(__name__)

Stage = Callable[[ExperimentConfig], dict]

STAGES: dict[str, Stage] = {
    "synth-data": stage_synth_data,
    "train-jscc": stage_train_jscc,
    "train-downstream": stage_train_downstream,
    "train-pgm": stage_train_pgm,
    "attack-sweep": stage_attack_sweep,
    "defend": stage_defend,
    "detect": stage_detect,
    "report": stage_report,
}


@dataclass
class RunRecord:
    """What a run produced. Only ``wall_clock_seconds`` and ``created_at`` vary between equal-config runs."""

    run_id: str
    seed: int
    config_hash: str
    stage_results: list[dict]
    checkpoint_hashes: dict[str, str] = field(default_factory=dict)
    metric_rows: dict[str, list[dict]] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    created_at: str = ""

    @property
    def succeeded(self) -> bool:
        return all(r["status"] == "success" for r in self.stage_results)

    @property
    def exit_code(self) -> int:
        failed = [r for r in self.stage_results if r["status"] == "error"]
        return failed[0].get("exit_code", 2) if failed else 0


def _ledger_records(record: RunRecord) -> list[dict]:
    return [
        {
            "run_id": record.run_id,
            "stage": result["stage"],
            "seed": record.seed,
            "config_hash": record.config_hash,
            "status": result["status"],
            "error": result.get("error"),
            "outputs": json.dumps(result.get("outputs", [])),
            "duration_seconds": result.get("duration_seconds"),
        }
        for result in record.stage_results
    ]


def run_stage(name: str, config: ExperimentConfig) -> dict:
    """Run one stage; failures come back as error payloads carrying the stage id."""
    if name not in STAGES:
        raise ConfigError(f"unknown stage '{name}', expected one of {list(STAGES)}")
    start_time = datetime.now(pytz.UTC)
    logger.info(f"Starting stage {name} (seed {config.seed}, config {config.config_hash[:12]})")
    try:
        fields = STAGES[name](config)
    except SimulatorError as e:
        error = e if isinstance(e, StageError) else StageError(name, e.message)
        error.exit_code = e.exit_code if isinstance(e, ConfigError) else 2
        logger.error(clean_error_message(e, stage=name))
        return create_error_response(name, start_time, error, cause=type(e).__name__)
    except Exception as e:
        # any other failure is a stage failure
        logger.error(clean_error_message(e, stage=name))
        return create_error_response(name, start_time, StageError(name, str(e)), cause=type(e).__name__)
    response = create_success_response(name, start_time, **fields)
    logger.info(f"✓ {name} completed in {response['duration_seconds']:.1f}s")
    return response


def run_experiment(config: ExperimentConfig, stages: Sequence[str] | None = None) -> RunRecord:
    """
    Execute ``stages`` (all, in pipeline order, by default) and return the RunRecord.

    Stages run in the order given; the first failure stops the run. Every executed
    stage is written to the ledger whatever its outcome.
    """
    selected = list(stages) if stages is not None else list(STAGES)
    unknown = [s for s in selected if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}, expected any of {list(STAGES)}")
    start_time = datetime.now(pytz.UTC)
    paths = RunPaths(config.output_path)

    results = []
    for name in selected:
        result = run_stage(name, config)
        results.append(result)
        if result["status"] == "error":
            categorize_stage_errors([{**result, "error_type": result.get("cause", result["error_type"])}], name)
            break

    record = RunRecord(
        run_id=run_id(config),
        seed=config.seed,
        config_hash=config.config_hash,
        stage_results=results,
        checkpoint_hashes=paths.checkpoint_hashes(),
        metric_rows={table: read_rows(paths.result(table)).to_dict("records") for table in RESULT_TABLES if paths.result(table).exists()},
        wall_clock_seconds=(datetime.now(pytz.UTC) - start_time).total_seconds(),
        created_at=start_time.isoformat(),
    )
    database = ledger_path(paths)
    init_schema(database)
    upsert_many("run_records", _ledger_records(record), database)

    counts = summarize_results(results)
    mark = "✓" if record.succeeded else "✗"
    logger.info(f"{mark} Run {record.run_id}: {counts['successful']}/{len(selected)} stage(s) succeeded in {record.wall_clock_seconds:.1f}s")
    return record
