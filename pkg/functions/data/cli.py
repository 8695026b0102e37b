import logging

from functions.harness.artifacts import RunPaths
from shared.config import ExperimentConfig
from shared.error_reporting import ensure_success
from shared.rng import child_seed, stream
from shared.utils import run_job

from .helpers import synth_all


logger = logging.getLogger(__name__)

OWNERS = ("victim", "attacker")


def owner_seed(seed: int, owner: str) -> int:
    """The victim uses the master seed; the attacker's data comes from an independent draw."""
    return seed if owner == "victim" else child_seed(stream(seed, "data-owner", owner))


def stage_synth_data(config: ExperimentConfig) -> dict:
    """Victim and attacker copies of every configured dataset kind."""
    paths = RunPaths(config.output_path)
    sizes = config.datasets.sizes()
    results = []
    for owner in OWNERS:

        def job(owner=owner) -> dict:
            written = synth_all(sizes, owner_seed(config.seed, owner), paths.data_dir / owner)
            return {"outputs": [r["path"] for r in written.values()], "records": sum(r["records"] for r in written.values())}

        results.append(run_job(f"datasets/{owner}", job))
    ensure_success(results, "synth-data")
    return {"outputs": [p for r in results for p in r["outputs"]], "records": sum(r["records"] for r in results)}
