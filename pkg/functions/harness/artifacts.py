"""
Run directory layout and (de)serialisation of every stage artifact.

``<out>/data`` holds datasets, ``<out>/checkpoints`` MGMW files with JSON sidecars and
``<out>/results`` the CSV tables and the JSON summary.
"""

from dataclasses import dataclass
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from db.checkpoint import content_hash, load_module_state, save_checkpoint, save_module
from functions.attack.helpers import EvalSetup, PgmTrainingConfig, UniversalPerturbation, sample_attacker_channels
from functions.attack.models import Pgm, build_pgm
from functions.data.helpers import SyntheticDataset
from functions.downstream.models import Classifier
from functions.jscc.helpers import ChannelSettings, restore_codec
from functions.jscc.models import CodecKey, JsccCodec
from shared import autodiff as ad
from shared.config import ExperimentConfig, ScenarioSection
from shared.errors import CheckpointError
from shared.rng import stream


logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"

ATTACK_COLUMNS = [
    "scenario",
    "modality",
    "psr_db",
    "baseline",
    "metric",
    "clean",
    "attacked",
    "degradation",
    "measured_psr_db",
    "budget_share",
    "p_value_vs_random",
    "p_value_vs_vanilla",
    "rule_agreement",
    "trials",
    "seed",
    "config_hash",
]
DEFENSE_COLUMNS = [
    "scenario",
    "modality",
    "psr_db",
    "defense",
    "metric",
    "no_attack",
    "attacked",
    "defended",
    "defense_clean",
    "residual_power_ratio",
    "trials",
    "seed",
    "config_hash",
]
DETECTION_COLUMNS = [
    "scenario",
    "modality",
    "codec",
    "psr_db",
    "attacker",
    "stage",
    "auc",
    "detection_rate",
    "false_positive_rate",
    "samples",
    "seed",
    "config_hash",
]
RESULT_TABLES = {"attack_sweep": ATTACK_COLUMNS, "defenses": DEFENSE_COLUMNS, "detection": DETECTION_COLUMNS}


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def results_dir(self) -> Path:
        return self.root / "results"

    def dataset(self, kind: str, owner: str = "victim") -> Path:
        return self.data_dir / owner / f"{kind}.npz"

    def codec(self, role: str, key: CodecKey) -> Path:
        return self.checkpoint_dir / "jscc" / role / f"{key.slug}.mgmw"

    def classifier(self, role: str, task: str) -> Path:
        return self.checkpoint_dir / "downstream" / role / f"{task}.mgmw"

    def generator(self, name: str) -> Path:
        return self.checkpoint_dir / "attack" / f"{name}.mgmw"

    def uap(self, mode: str, modality: str) -> Path:
        return self.checkpoint_dir / "attack" / "uap" / f"{mode}-{modality}.mgmw"

    def result(self, table: str) -> Path:
        return self.results_dir / f"{table}.csv"

    @property
    def summary(self) -> Path:
        return self.results_dir / "summary.json"

    def checkpoints(self) -> list[Path]:
        return sorted(self.checkpoint_dir.rglob("*.mgmw")) if self.checkpoint_dir.exists() else []

    def checkpoint_hashes(self) -> dict[str, str]:
        return {str(path.relative_to(self.root)): content_hash(path) for path in self.checkpoints()}


# ---------------------------------------------------------------------------
# Config-derived settings
# ---------------------------------------------------------------------------


def codec_keys(config: ExperimentConfig) -> list[CodecKey]:
    grid = config.codecs
    return [CodecKey(m, c, r) for m in grid.modalities for c in grid.constellations for r in grid.rates]


def training_settings(config: ExperimentConfig) -> ChannelSettings:
    """Training links use the first scenario's tap profile at the configured SNR."""
    return ChannelSettings(config.channel.n_taps, config.scenarios[0].decay, config.channel.snr_db)


def scenario_setup(config: ExperimentConfig, scenario: ScenarioSection, trials: int | None = None) -> EvalSetup:
    """Evaluation context for one scenario preset with its own attacker-channel set."""
    settings = scenario.settings(config.channel.snr_db)
    cfg = config.ofdm.build()
    rng = stream(config.seed, "attacker-channels", scenario.name)
    channels = sample_attacker_channels(rng, config.channel.attacker_channels, settings, cfg.n_fft)
    return EvalSetup(settings, channels, config.seed, scenario.name, trials or config.evaluation.trials, config.evaluation.workers, cfg)


def pgm_training_config(config: ExperimentConfig, **overrides) -> PgmTrainingConfig:
    section = config.pgm
    values = {
        "epochs": section.epochs,
        "batch_size": section.batch_size,
        "batches_per_epoch": section.batches_per_epoch,
        "lr": section.lr,
        "psr_range": tuple(section.psr_range),
        "mu": section.mu,
        "latent_dim": section.latent_dim,
        "n_rows": section.n_rows,
        "channels": section.channels,
        "blocks": section.blocks,
        "beta_cls": section.beta_cls,
        "beta_ds": section.beta_ds,
        "beta_dv": section.beta_dv,
        "tasks": tuple(t for t in config.evaluation.tasks),
    }
    values.update(overrides)
    return PgmTrainingConfig(**values)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def write_rows(rows: list[dict], path: Path, columns: list[str], config_hash: str | None = None) -> Path:
    """Fixed column order and float format so equal inputs give identical bytes."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if config_hash is not None:
        rows = [{**row, "config_hash": config_hash} for row in rows]
    frame = pd.DataFrame(rows).reindex(columns=columns)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_rows(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise CheckpointError(f"missing result table {path}")
    return pd.read_csv(path)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def load_datasets(paths: RunPaths, kinds: list[str], owner: str = "victim") -> dict[str, SyntheticDataset]:
    return {kind: SyntheticDataset.load(paths.dataset(kind, owner)) for kind in kinds}


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def save_codec(paths: RunPaths, codec: JsccCodec) -> Path:
    return save_module(codec.network, paths.codec(codec.role, codec.key), codec.descriptor())


def load_codec(paths: RunPaths, role: str, key: CodecKey) -> JsccCodec:
    descriptor, state = load_module_state(paths.codec(role, key))
    return restore_codec(descriptor, state)


def load_codecs(paths: RunPaths, role: str, keys: list[CodecKey]) -> list[JsccCodec]:
    return [load_codec(paths, role, key) for key in keys]


def save_classifier(paths: RunPaths, classifier: Classifier) -> Path:
    return save_module(classifier.network, paths.classifier(classifier.role, classifier.task), classifier.descriptor())


def load_classifier(paths: RunPaths, role: str, task: str) -> Classifier:
    descriptor, state = load_module_state(paths.classifier(role, task))
    classifier = Classifier.from_descriptor(descriptor)
    classifier.network.load_state_dict(state)
    return classifier


def save_generator(paths: RunPaths, name: str, pgm: Pgm, mu: int) -> Path:
    return save_module(pgm, paths.generator(name), {**pgm.descriptor(), "mu": mu})


def load_generator(paths: RunPaths, name: str) -> tuple[Pgm, int]:
    descriptor, state = load_module_state(paths.generator(name))
    pgm = build_pgm(descriptor, np.random.default_rng(0))
    pgm.load_state_dict(state)
    return pgm, int(descriptor["mu"])


def save_uap(paths: RunPaths, uap: UniversalPerturbation) -> Path:
    descriptor = {"mode": uap.mode, "modality": uap.modality, "constellation": uap.constellation}
    return save_checkpoint({"delta": ad.to_pair(uap.delta)}, paths.uap(uap.mode, uap.modality), descriptor)


def load_uap(paths: RunPaths, mode: str, modality: str) -> UniversalPerturbation:
    descriptor, state = load_module_state(paths.uap(mode, modality))
    if "delta" not in state:
        raise CheckpointError(f"UAP checkpoint for {mode}/{modality} has no 'delta' tensor")
    return UniversalPerturbation(ad.to_complex(state["delta"]), descriptor["mode"], descriptor["modality"], descriptor["constellation"])
