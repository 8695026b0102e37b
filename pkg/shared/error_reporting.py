from datetime import datetime
import logging
from typing import Any

import pytz

from shared.errors import StageError


logger = logging.getLogger(__name__)

_CATEGORIES = {
    "ConfigError": "config_errors",
    "ShapeError": "shape_errors",
    "NonFiniteError": "non_finite_errors",
    "DivergenceError": "divergence_errors",
    "CheckpointError": "checkpoint_errors",
}


def _category(result: dict) -> str:
    error_type = result.get("error_type", "")
    if error_type in _CATEGORIES:
        return _CATEGORIES[error_type]
    error_msg = str(result.get("error", "")).lower()
    if "nan" in error_msg or "non-finite" in error_msg or "diverg" in error_msg:
        return "divergence_errors"
    if "checkpoint" in error_msg or "magic" in error_msg:
        return "checkpoint_errors"
    if "shape" in error_msg:
        return "shape_errors"
    return "other_errors"


def categorize_stage_errors(results: list[dict], stage: str = "stage", log_output: bool = True) -> dict[str, Any]:
    """
    Bucket failed stage results by failure kind.

    Args:
        results: Stage result payloads (``status`` is "success" or "error")
        stage: Name used in the log summary

    Returns:
        Dictionary with per-category counts and details
    """
    categories: dict[str, list[dict]] = {name: [] for name in (*_CATEGORIES.values(), "other_errors")}
    successful = [r for r in results if r.get("status") == "success"]
    failed = [r for r in results if r.get("status") == "error"]

    for result in failed:
        categories[_category(result)].append({"stage": result.get("stage", stage), "error": result.get("error", "")})

    summary = {
        "stage": stage,
        "timestamp": datetime.now(pytz.UTC).isoformat(),
        "total": len(results),
        "successful": len(successful),
        "failed": len(failed),
        "error_categories": {name: len(items) for name, items in categories.items()},
        "details": categories,
    }

    if log_output and failed:
        logger.warning(f"{stage} errors summary:")
        logger.warning(f"  Total: {len(failed)}/{len(results)} failed")
        for name, items in categories.items():
            if items:
                logger.warning(f"  {name.replace('_', ' ').capitalize()}: {len(items)} - {[e['stage'] for e in items[:3]]}")

    return summary


def ensure_success(results: list[dict], stage: str) -> None:
    """Raise StageError naming the failed items when any result is an error."""
    failed = [r for r in results if r.get("status") == "error"]
    if not failed:
        return
    categorize_stage_errors(results, stage)
    names = ", ".join(str(r.get("stage", "?")) for r in failed[:3])
    raise StageError(stage, f"{len(failed)} of {len(results)} item(s) failed ({names}): {failed[0].get('error', '')}")
