import argparse
import logging
import os
from pathlib import Path
import sys

from dotenv import load_dotenv

from functions.harness.helpers import STAGES, run_experiment
from shared.config import load_experiment_config, load_local_settings
from shared.errors import ConfigError
from shared.utils import clean_error_message


logger = logging.getLogger("experiment_app")

# Pipeline stage invoked by each subcommand
SUBCOMMANDS = {
    "synth-data": "Generate the victim and attacker datasets",
    "train-jscc": "Train target and surrogate JSCC codecs",
    "train-downstream": "Train target and surrogate downstream classifiers",
    "train-pgm": "Train the perturbation generators and UAP baselines",
    "attack-sweep": "Evaluate every baseline over the PSR sweep",
    "defend": "Train the defender generator, harden codecs and evaluate defenses",
    "detect": "Train and fine-tune perturbation detectors",
    "report": "Aggregate result tables into the summary and run ledger",
    "run": "Run every stage in order",
}


def configure_logging() -> None:
    level = os.getenv("LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Deterministic JSCC-over-OFDM attack and defense simulator.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, default=None, help="Experiment config JSON (defaults when omitted)")
        sub.add_argument("--seed", type=int, default=None, help="Master seed override")
        sub.add_argument("--out", type=Path, default=None, help="Output directory override")
    return parser


def main(argv: list[str] | None = None) -> int:
    # Load environment variables first
    load_dotenv()
    load_local_settings()
    configure_logging()

    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {args.seed}")
        config = load_experiment_config(args.config, args.seed, args.out)
    except ConfigError as e:
        logger.error(clean_error_message(e, "Loading configuration"))
        return e.exit_code

    stages = list(STAGES) if args.command == "run" else [args.command]
    try:
        record = run_experiment(config, stages)
    except ConfigError as e:
        logger.error(clean_error_message(e, "Running experiment"))
        return e.exit_code
    except Exception as e:
        logger.error(clean_error_message(e, "Recording run"))
        return 2
    return record.exit_code


if __name__ == "__main__":
    sys.exit(main())
