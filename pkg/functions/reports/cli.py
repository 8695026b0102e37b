import json
import logging
import math
import os
from pathlib import Path

import pandas as pd

from db.db_client import init_schema, upsert_many
from functions.harness.artifacts import RESULT_TABLES, RunPaths, read_rows
from shared.config import ExperimentConfig
from shared.errors import CheckpointError


logger = logging.getLogger(__name__)

# (group columns, value column) summarised per table
SUMMARY_VIEWS = {
    "attack_sweep": (["scenario", "modality", "baseline"], "degradation"),
    "defenses": (["scenario", "modality", "defense"], "defended"),
    "detection": (["scenario", "attacker", "stage"], "auc"),
}
LABEL_COLUMNS = {"attack_sweep": "baseline", "defenses": "defense", "detection": "attacker"}


def ledger_path(paths: RunPaths) -> Path:
    return Path(os.getenv("DATABASE_PATH") or paths.root / "runs.db")


def run_id(config: ExperimentConfig) -> str:
    """Equal configs share a run id, so a rerun replaces its ledger rows."""
    return config.config_hash[:16]


def _finite(value) -> float | None:
    return None if value is None or (isinstance(value, float) and not math.isfinite(value)) else float(value)


def summarize_table(table: str, frame: pd.DataFrame) -> dict:
    groups, value = SUMMARY_VIEWS[table]
    means = frame.groupby(groups, sort=True)[value].mean()
    return {
        "rows": int(len(frame)),
        "mean_" + value: {"/".join(str(k) for k in key): _finite(v) for key, v in means.items()},
    }


def metric_rows(config: ExperimentConfig, table: str, frame: pd.DataFrame) -> list[dict]:
    """Flatten one result table into ledger rows."""
    label, value = LABEL_COLUMNS[table], SUMMARY_VIEWS[table][1]
    metric = frame["metric"] if "metric" in frame else pd.Series([value] * len(frame))
    rows = []
    for index, row in enumerate(frame.to_dict("records")):
        rows.append(
            {
                "run_id": run_id(config),
                "result_file": f"{table}.csv",
                "row_index": index,
                "scenario": row.get("scenario"),
                "modality": row.get("modality"),
                "psr_db": _finite(row.get("psr_db")),
                "label": row.get(label),
                "metric": str(metric.iloc[index]),
                "value": _finite(row.get(value)),
            }
        )
    return rows


def stage_report(config: ExperimentConfig) -> dict:
    """Aggregate every result table present into the JSON summary and the sqlite ledger."""
    paths = RunPaths(config.output_path)
    tables = {}
    for table in RESULT_TABLES:
        try:
            tables[table] = read_rows(paths.result(table))
        except CheckpointError:
            logger.info(f"ℹ️  No {table} table yet, skipping")
    if not tables:
        raise CheckpointError(f"no result tables under {paths.results_dir}; run attack-sweep, defend or detect first")

    summary = {
        "run_id": run_id(config),
        "seed": config.seed,
        "config_hash": config.config_hash,
        "checkpoint_hashes": paths.checkpoint_hashes(),
        "tables": {table: summarize_table(table, frame) for table, frame in tables.items()},
    }
    paths.summary.parent.mkdir(parents=True, exist_ok=True)
    paths.summary.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    database = ledger_path(paths)
    init_schema(database)
    stored = sum(upsert_many("metric_rows", metric_rows(config, table, frame), database) for table, frame in tables.items())
    logger.info(f"✓ Report: {len(tables)} table(s), {stored} ledger rows in {database}")
    return {"outputs": [str(paths.summary)], "tables": sorted(tables), "ledger_rows": stored}
