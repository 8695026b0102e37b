from collections.abc import Callable
from datetime import datetime
import logging
from typing import Any

import pytz

from shared.errors import SimulatorError, StageError


logger = logging.getLogger(__name__)


def clean_error_message(error: BaseException | str, context: str = "", stage: str = "") -> str:
    """
    One-line, console-friendly failure message.

    Args:
        error: The exception (or its string)
        context: What was being done (e.g. "Training image codec")
        stage: Optional stage name to lead the message with

    Returns:
        "✗ <stage or context>: <reason>"
    """
    if isinstance(error, StageError):
        stage = stage or error.stage
    message = error.message if isinstance(error, SimulatorError) else str(error)
    message = " ".join(message.split())
    kind = type(error).__name__ if isinstance(error, BaseException) else ""

    if kind in ("NonFiniteError", "DivergenceError"):
        message = f"numerical failure ({message})"
    elif kind == "ConfigError":
        message = f"configuration error ({message})"
    elif kind == "CheckpointError":
        message = f"checkpoint problem ({message})"
    elif kind == "FileNotFoundError":
        message = f"missing file ({message})"

    if stage:
        return f"✗ {stage}: {message}"
    if context:
        return f"✗ {context}: {message}"
    return f"✗ {message}"


def create_success_response(
    stage: str,
    start_time: datetime,
    outputs: list[str] | None = None,
    message: str | None = None,
    **fields,
) -> dict[str, Any]:
    """Stage result payload for a completed stage."""
    response = {
        "status": "success",
        "stage": stage,
        "outputs": outputs or [],
        "duration_seconds": (datetime.now(pytz.UTC) - start_time).total_seconds(),
    }
    if message:
        response["message"] = message
    response.update(fields)
    return response


def create_error_response(stage: str, start_time: datetime, error: BaseException | str, **fields) -> dict[str, Any]:
    response = {
        "status": "error",
        "stage": stage,
        "error": str(error),
        "error_type": type(error).__name__ if isinstance(error, BaseException) else "error",
        "exit_code": error.exit_code if isinstance(error, SimulatorError) else 2,
        "duration_seconds": (datetime.now(pytz.UTC) - start_time).total_seconds(),
    }
    response.update(fields)
    return response


def summarize_results(results: list[dict[str, Any]]) -> dict[str, int]:
    successful = len([r for r in results if r.get("status") == "success"])
    failed = len([r for r in results if r.get("status") == "error"])
    return {"total": len(results), "successful": successful, "failed": failed}


def run_job(name: str, job: Callable[[], dict[str, Any]]) -> dict[str, Any]:
    """
    Run one unit of stage work and wrap its outcome as a result payload.

    ``job`` returns the fields to attach (``outputs`` included); simulator errors become
    error payloads, anything else propagates.
    """
    start_time = datetime.now(pytz.UTC)
    try:
        fields = job()
    except SimulatorError as e:
        logger.error(clean_error_message(e, stage=name))
        return create_error_response(name, start_time, e)
    response = create_success_response(name, start_time, **fields)
    logger.info(f"✓ {name} ({response['duration_seconds']:.1f}s)")
    return response
