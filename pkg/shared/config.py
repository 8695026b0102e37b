"""
Environment and experiment configuration.

``load_local_settings`` imports the ``Values`` block of ``local.settings.json`` into the
environment; ``ExperimentConfig`` is the validated JSON experiment description.
"""

import hashlib
import json
import logging
import os
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from functions.jscc.helpers import ChannelSettings
from functions.jscc.models import MODALITIES, RATES
from functions.phy.helpers import SCHEMES, OfdmConfig
from shared.errors import ConfigError


logger = logging.getLogger(__name__)

PSR_LIMITS = (-20.0, -10.0)
DEFAULT_OUT_DIR = "results"


def load_local_settings(settings_file: Path | None = None) -> bool:
    """Load environment variables from local.settings.json if it exists"""
    settings_file = settings_file or Path(__file__).resolve().parent.parent / "local.settings.json"

    if settings_file.exists():
        try:
            values = json.loads(settings_file.read_text()).get("Values", {})
            for key, value in values.items():
                os.environ[key] = str(value)
            logger.info(f"✅ Loaded {len(values)} settings from {settings_file.name}")
            return True
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"❌ Error loading {settings_file.name}: {e}")
            return False
    logger.info(f"ℹ️  {settings_file.name} not found")
    return False


def env_seed(default: int = 0) -> int:
    raw = os.getenv("EXPERIMENT_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"EXPERIMENT_SEED must be an integer, got '{raw}'") from e


def env_out_dir() -> Path:
    return Path(os.getenv("EXPERIMENT_OUT_DIR", DEFAULT_OUT_DIR))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class OfdmSection(_Section):
    n_fft: int = 64
    cp_len: int = 16

    def build(self) -> OfdmConfig:
        if self.n_fft != 64:
            raise ConfigError("only the 64-subcarrier layout is supported")
        return OfdmConfig(n_fft=self.n_fft, cp_len=self.cp_len)


class ScenarioSection(_Section):
    """A channel-sampler preset standing in for a propagation environment."""

    name: str
    n_taps: int = Field(8, ge=1)
    decay: float = Field(0.5, gt=0.0, le=1.0)

    def settings(self, snr_db: float) -> ChannelSettings:
        return ChannelSettings(self.n_taps, self.decay, snr_db)


def default_scenarios() -> list[ScenarioSection]:
    return [ScenarioSection(name="los", decay=0.5), ScenarioSection(name="nlos", decay=1.0)]


class ChannelSection(_Section):
    n_taps: int = Field(8, ge=1)
    snr_db: float = 10.0
    attacker_channels: int = Field(2000, ge=1)


class CodecGridSection(_Section):
    modalities: list[str] = Field(default_factory=lambda: list(MODALITIES))
    constellations: list[str] = Field(default_factory=lambda: list(SCHEMES))
    rates: list[str] = Field(default_factory=lambda: list(RATES))
    surrogate_width_delta: int = -4
    surrogate_depth_delta: int = 0
    surrogate_hidden_delta: int = 8

    @field_validator("modalities")
    @classmethod
    def _known_modalities(cls, value: list[str]) -> list[str]:
        unknown = sorted(set(value) - set(MODALITIES))
        if unknown:
            raise ValueError(f"unknown modalities {unknown}")
        return value

    @field_validator("constellations")
    @classmethod
    def _known_constellations(cls, value: list[str]) -> list[str]:
        unknown = sorted(set(value) - set(SCHEMES))
        if unknown:
            raise ValueError(f"unknown constellations {unknown}")
        return value

    @field_validator("rates")
    @classmethod
    def _known_rates(cls, value: list[str]) -> list[str]:
        unknown = sorted(set(value) - set(RATES))
        if unknown:
            raise ValueError(f"unknown rates {unknown}")
        return value


class PgmSection(_Section):
    latent_dim: int = Field(128, ge=1)
    n_rows: int = Field(4, ge=1)
    mu: int = Field(3, ge=1)
    channels: int = Field(8, ge=1)
    blocks: int = Field(3, ge=0)
    epochs: int = Field(5, ge=0)
    batch_size: int = Field(8, ge=1)
    batches_per_epoch: int | None = None
    lr: float = Field(1e-3, gt=0.0)
    beta_cls: float = 1.0
    beta_ds: float = 1.0
    beta_dv: float = 1.0
    psr_range: tuple[float, float] = PSR_LIMITS
    target_class: int | None = None
    ablation_modalities: list[str] | None = None
    ablation_constellations: list[str] | None = None


class TrainingSection(_Section):
    jscc_epochs: int = Field(10, ge=0)
    downstream_epochs: int = Field(10, ge=0)
    uap_epochs: int = Field(5, ge=0)
    adversarial_epochs: int = Field(5, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0.0)


class DatasetSection(_Section):
    image: int = Field(64, ge=1)
    video: int = Field(32, ge=1)
    speech: int = Field(64, ge=1)
    text: int = Field(64, ge=1)
    vc: int = Field(32, ge=1)
    ave: int = Field(32, ge=1)

    def sizes(self) -> dict[str, int]:
        return self.model_dump()


class EvaluationSection(_Section):
    psr_sweep: list[float] = Field(default_factory=lambda: [-20.0, -18.0, -16.0, -14.0, -12.0, -10.0])
    trials: int = Field(200, ge=1)
    defense_trials: int = Field(50, ge=1)
    detection_items: int = Field(64, ge=1)
    workers: int = Field(4, ge=1)
    tasks: list[str] = Field(default_factory=lambda: ["vc", "ave"])


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0)
    allow_psr_override: bool = False
    ofdm: OfdmSection = Field(default_factory=OfdmSection)
    channel: ChannelSection = Field(default_factory=ChannelSection)
    scenarios: list[ScenarioSection] = Field(default_factory=default_scenarios)
    codecs: CodecGridSection = Field(default_factory=CodecGridSection)
    pgm: PgmSection = Field(default_factory=PgmSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    datasets: DatasetSection = Field(default_factory=DatasetSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    out_dir: str = DEFAULT_OUT_DIR

    @model_validator(mode="after")
    def _psr_within_limits(self) -> "ExperimentConfig":
        if self.allow_psr_override:
            return self
        low, high = PSR_LIMITS
        values = [*self.evaluation.psr_sweep, *self.pgm.psr_range]
        outside = [v for v in values if not low <= v <= high]
        if outside:
            raise ValueError(f"PSR values {outside} outside [{low}, {high}] dB; set allow_psr_override to use them")
        return self

    @model_validator(mode="after")
    def _unique_scenarios(self) -> "ExperimentConfig":
        names = [s.name for s in self.scenarios]
        if len(names) != len(set(names)) or not names:
            raise ValueError(f"scenario names must be unique and non-empty, got {names}")
        return self

    def with_overrides(self, seed: int | None = None, out_dir: str | Path | None = None) -> "ExperimentConfig":
        updates = {}
        if seed is not None:
            updates["seed"] = seed
        if out_dir is not None:
            updates["out_dir"] = str(out_dir)
        return self.model_validate({**self.model_dump(), **updates}) if updates else self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @property
    def output_path(self) -> Path:
        return Path(self.out_dir)


def parse_experiment_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e.error_count()} error(s): {e.errors()[0]['msg']}") from e


def load_experiment_config(path: Path | str | None = None, seed: int | None = None, out_dir: str | Path | None = None) -> ExperimentConfig:
    """
    Config from ``path`` (defaults when None), then EXPERIMENT_SEED / EXPERIMENT_OUT_DIR,
    then explicit overrides.
    """
    if path is None:
        config = ExperimentConfig()
        env_overrides = {}
        if os.getenv("EXPERIMENT_SEED") is not None:
            env_overrides["seed"] = env_seed()
        if os.getenv("EXPERIMENT_OUT_DIR") is not None:
            env_overrides["out_dir"] = str(env_out_dir())
        config = config.with_overrides(**env_overrides)
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        config = parse_experiment_config(path.read_text(encoding="utf-8"))
    try:
        return config.with_overrides(seed, out_dir)
    except ValidationError as e:
        raise ConfigError(f"invalid override: {e.errors()[0]['msg']}") from e
