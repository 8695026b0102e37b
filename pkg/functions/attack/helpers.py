"""
Perturbation injection, attack losses, generator training against a surrogate ensemble,
trained UAP baselines and attack evaluation sweeps.
"""

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime
import logging
import math

import numpy as np
import pytz
from scipy.stats import ttest_rel

from functions.attack.models import Discriminator, Pgm, generate, sample_latent
from functions.attack.transform import (
    TransformParams,
    apply_transform,
    psr_to_epsilon,
    random_params,
    received_interference,
    scale_to_budget,
    transform_graph,
)
from functions.data.helpers import SyntheticDataset
from functions.downstream.helpers import (
    TASK_CODECS,
    AttackRecord,
    attack_success_rate,
    classify,
    probabilities,
    targeted_margin,
    task_draws,
    task_inputs,
    task_link_graph,
    task_link_numpy,
    untargeted_margin,
)
from functions.downstream.models import Classifier
from functions.jscc.helpers import (
    ChannelSettings,
    Interference,
    LinkDraw,
    degradation,
    forward_link,
    link_draws,
    quality_scores,
    reconstruction_loss,
    run_link,
)
from functions.jscc.models import MODALITIES, JsccCodec
from functions.phy.helpers import OfdmConfig, complex_gaussian, measure_psr, ofdm_modulate, payload_samples, sample_channel, signal_energy
from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import AttackError, DivergenceError, ShapeError
from shared.optim import Adam
from shared.rng import child_seed, stream


logger = logging.getLogger(__name__)

BASELINES = ("none", "random", "vanilla-uap", "sync-free-uap", "magmaw")
PSR_SWEEP = (-20.0, -18.0, -16.0, -14.0, -12.0, -10.0)
ATTACKER_CHANNELS = 2000


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


def sample_attacker_channels(rng: np.random.Generator, count: int, settings: ChannelSettings, n_fft: int = 64) -> np.ndarray:
    """Attacker-to-receiver responses H_a, drawn once and reused, as (count, n_fft)."""
    return np.stack([sample_channel(rng, settings.n_taps, settings.decay, n_fft=n_fft).freq_response for _ in range(count)])


@dataclass
class SurrogateEnsemble:
    codecs: list[JsccCodec]
    datasets: dict[str, SyntheticDataset]
    settings: ChannelSettings
    attacker_channels: np.ndarray
    downstream: dict[str, Classifier] = field(default_factory=dict)

    def __post_init__(self):
        if not self.codecs:
            raise AttackError("surrogate ensemble is empty")
        if self.attacker_channels.ndim != 2 or len(self.attacker_channels) == 0:
            raise AttackError("attacker channel set must be a non-empty (count, n_fft) array")

    @property
    def modalities(self) -> list[str]:
        return [m for m in MODALITIES if any(c.modality == m for c in self.codecs)]

    def codecs_for(self, modality: str, constellations: Sequence[str] | None = None) -> list[JsccCodec]:
        found = [c for c in self.codecs if c.modality == modality and (constellations is None or c.constellation in constellations)]
        if not found:
            raise AttackError(f"no surrogate codec for {modality} with constellations {constellations}")
        return found

    def sample_codec(self, rng: np.random.Generator, modality: str, constellations: Sequence[str] | None = None) -> JsccCodec:
        """(C, lambda) uniformly among the ensemble's codecs for ``modality``."""
        candidates = self.codecs_for(modality, constellations)
        return candidates[int(rng.integers(0, len(candidates)))]

    def sample_attacker_channel(self, rng: np.random.Generator) -> np.ndarray:
        return self.attacker_channels[int(rng.integers(0, len(self.attacker_channels)))]


def build_ensemble(
    codecs: list[JsccCodec],
    datasets: dict[str, SyntheticDataset],
    settings: ChannelSettings,
    seed: int,
    downstream: dict[str, Classifier] | None = None,
    attacker_channels: int = ATTACKER_CHANNELS,
    n_fft: int = 64,
) -> SurrogateEnsemble:
    channels = sample_attacker_channels(stream(seed, "attacker-channels"), attacker_channels, settings, n_fft)
    return SurrogateEnsemble(codecs, datasets, settings, channels, dict(downstream or {}))


# ---------------------------------------------------------------------------
# Injection and losses
# ---------------------------------------------------------------------------


def inject(y: np.ndarray, h_t: np.ndarray, h_a: np.ndarray, perturbation: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Y_bar = H_t Y + H_a P(delta) + W, with the perturbation truncated to Y's rows."""
    y = np.asarray(y, dtype=np.complex128)
    perturbation = np.asarray(perturbation, dtype=np.complex128)
    rows = y.shape[-2]
    if perturbation.shape[-2] < rows:
        raise ShapeError(f"perturbation has {perturbation.shape[-2]} rows, victim has {rows}")
    perturbation = perturbation[..., :rows, :]
    if perturbation.shape[-1] != y.shape[-1] or np.shape(noise) != y.shape:
        raise ShapeError(f"inject shapes disagree: Y {y.shape}, P {perturbation.shape}, W {np.shape(noise)}")
    return h_t * y + h_a * perturbation + noise


def loss_rx(modality: str, x: np.ndarray, x_bar: Tensor) -> Tensor:
    if modality not in MODALITIES:
        raise AttackError(f"modality mismatch: '{modality}' is not one of {MODALITIES}")
    return reconstruction_loss(modality, x, x_bar)


def loss_ds(discriminator: Discriminator, clean: Tensor, perturbed: Tensor) -> Tensor:
    """mean[log D(clean) + log(1 - D(perturbed))] with D clamped to [1e-7, 1 - 1e-7]."""
    d_clean = ad.clip(discriminator(clean), 1e-7, 1.0 - 1e-7)
    d_perturbed = ad.clip(discriminator(perturbed), 1e-7, 1.0 - 1e-7)
    return ad.mean(ad.log(d_clean)) + ad.mean(ad.log(1.0 - d_perturbed))


def loss_dv(delta: Tensor, delta_other: Tensor) -> Tensor:
    """Mean absolute difference between two generator outputs."""
    return ad.mean_abs(ad.as_tensor(delta) - ad.as_tensor(delta_other))


def _mean_loss_ds(discriminator: Discriminator, clean: Sequence[Tensor], perturbed: Sequence[Tensor]) -> Tensor:
    total = None
    for c, p in zip(clean, perturbed, strict=True):
        term = loss_ds(discriminator, c, p)
        total = term if total is None else total + term
    return total * (1.0 / len(clean))


def victim_energy(y: Tensor, cfg: OfdmConfig = OfdmConfig()) -> np.ndarray:
    """Per-sample payload energy of transmitted data pairs plus the unit pilots (Parseval)."""
    data = np.asarray(y.data)
    return np.sum(data**2, axis=(1, 2, 3)) + data.shape[1] * len(cfg.pilot_subcarriers)


def graph_interference(
    delta: Tensor,
    tau: TransformParams,
    psr_db: float,
    h_a: np.ndarray,
    codec: JsccCodec,
    cfg: OfdmConfig = OfdmConfig(),
) -> Interference:
    """Interference callback for ``forward_link``: budget from each transmission's own energy."""

    def interference(step: int, y: Tensor) -> Tensor:
        epsilon = victim_energy(y, cfg) * 10.0 ** (psr_db / 10.0)
        return received_interference(transform_graph(delta, tau, epsilon), h_a, codec.n_rows(cfg.n_data), cfg)

    return interference


# ---------------------------------------------------------------------------
# Generator training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PgmTrainingConfig:
    epochs: int = 5
    batch_size: int = 8
    batches_per_epoch: int | None = None
    lr: float = 1e-3
    psr_range: tuple[float, float] = (-20.0, -10.0)
    mu: int = 3
    latent_dim: int = 128
    n_rows: int = 4
    channels: int = 8
    blocks: int = 3
    beta_cls: float = 1.0
    beta_ds: float = 1.0
    beta_dv: float = 1.0
    stealth: bool = True
    modalities: tuple[str, ...] | None = None
    constellations: tuple[str, ...] | None = None
    tasks: tuple[str, ...] | None = None
    target_class: int | None = None


@dataclass
class PgmTrainingResult:
    pgm: Pgm
    discriminator: Discriminator
    history: list[dict[str, float]]
    duration_seconds: float = 0.0


@dataclass
class _BatchTerms:
    rx: Tensor
    cls: Tensor | None
    clean_mapped: list[Tensor]
    perturbed_mapped: list[Tensor]


def _modality_batch(
    ensemble: SurrogateEnsemble,
    modality: str,
    x: np.ndarray,
    delta: Tensor,
    tau: TransformParams,
    psr_db: float,
    h_a: np.ndarray,
    rng: np.random.Generator,
    config: PgmTrainingConfig,
    cfg: OfdmConfig,
) -> _BatchTerms:
    codec = ensemble.sample_codec(rng, modality, config.constellations)
    gop = x.shape[1] if modality == "video" else 1
    draws = link_draws(rng, codec, x.shape[0], ensemble.settings, cfg, gop)
    with ad.no_grad():
        clean = forward_link(codec, x, draws, cfg)
    perturbed = forward_link(codec, x, draws, cfg, interference=graph_interference(delta, tau, psr_db, h_a, codec, cfg))
    return _BatchTerms(loss_rx(modality, x, perturbed.reconstruction), None, clean.mapped, perturbed.mapped)


def _task_batch(
    ensemble: SurrogateEnsemble,
    task: str,
    inputs: tuple[np.ndarray, ...],
    delta: Tensor,
    tau: TransformParams,
    psr_db: float,
    h_a: np.ndarray,
    rng: np.random.Generator,
    config: PgmTrainingConfig,
    cfg: OfdmConfig,
) -> _BatchTerms:
    codecs = {m: ensemble.sample_codec(rng, m, config.constellations) for m in TASK_CODECS[task]}
    link_seed = child_seed(rng)
    with ad.no_grad():
        clean = task_link_graph(task, codecs, inputs, np.random.Generator(np.random.PCG64(link_seed)), ensemble.settings, cfg)
        _, clean_class = classify(ensemble.downstream[task], clean.inputs)
    perturbed = task_link_graph(
        task,
        codecs,
        inputs,
        np.random.Generator(np.random.PCG64(link_seed)),
        ensemble.settings,
        cfg,
        interference_for=lambda codec: graph_interference(delta, tau, psr_db, h_a, codec, cfg),
    )
    probs = probabilities(ensemble.downstream[task], perturbed.inputs)
    if config.target_class is None:
        margin = untargeted_margin(probs, clean_class)
    else:
        margin = targeted_margin(probs, config.target_class)
    return _BatchTerms(perturbed.rx_loss, ad.mean(margin), clean.mapped, perturbed.mapped)


def _training_units(ensemble: SurrogateEnsemble, config: PgmTrainingConfig) -> list[str]:
    modalities = list(config.modalities) if config.modalities is not None else ensemble.modalities
    units = [m for m in modalities if m in ensemble.datasets]
    tasks = config.tasks if config.tasks is not None else tuple(ensemble.downstream)
    for task in tasks:
        needed = TASK_CODECS[task]
        if task in ensemble.downstream and task in ensemble.datasets and all(m in ensemble.modalities for m in needed):
            units.append(task)
    if not units:
        raise AttackError("no trainable modality or task in the ensemble")
    return units


def train_pgm(
    ensemble: SurrogateEnsemble,
    config: PgmTrainingConfig = PgmTrainingConfig(),
    seed: int = 0,
    cfg: OfdmConfig = OfdmConfig(),
    name: str = "magmaw",
) -> PgmTrainingResult:
    """
    Alternating generator/discriminator training. Per batch: sample (C, lambda), H_t,
    H_a, z, z' and tau; transmit clean and perturbed; take one generator step on
    -(L_rx + b_cls L_cls - b_ds L_ds + b_dv L_dv) and one discriminator step on -L_ds.
    """
    low, high = config.psr_range
    if low > high:
        raise AttackError(f"PSR range {config.psr_range} is empty")
    start_time = datetime.now(pytz.UTC)
    units = _training_units(ensemble, config)
    pgm = Pgm(stream(seed, name, "init", "pgm"), config.latent_dim, config.n_rows, cfg.n_fft, config.channels, config.blocks)
    discriminator = Discriminator(stream(seed, name, "init", "discriminator"), cfg.n_data)
    g_optimizer = Adam(pgm.named_parameters(), lr=config.lr)
    d_optimizer = Adam(discriminator.named_parameters(), lr=config.lr)
    beta_ds = config.beta_ds if config.stealth else 0.0
    beta_dv = config.beta_dv if config.stealth else 0.0
    rng = stream(seed, name, "train")
    logger.info(f"Training {name} generator on {units} for {config.epochs} epoch(s), PSR {config.psr_range} dB")

    history = []
    for epoch in range(config.epochs):
        sums = {"objective": 0.0, "rx": 0.0, "cls": 0.0, "ds": 0.0, "dv": 0.0}
        batches = 0
        for unit in units:
            dataset = ensemble.datasets[unit]
            for batch_index, indices in enumerate(dataset.batches(config.batch_size, rng)):
                if config.batches_per_epoch is not None and batch_index >= config.batches_per_epoch:
                    break
                z = sample_latent(rng, config.latent_dim)
                z_other = sample_latent(rng, config.latent_dim)
                psr_db = float(rng.uniform(low, high))
                tau = random_params(rng, config.mu, cfg)
                h_a = ensemble.sample_attacker_channel(rng)

                delta = ad.reshape(pgm(z), (config.n_rows, cfg.n_fft, 2))
                delta_other = ad.reshape(pgm(z_other), (config.n_rows, cfg.n_fft, 2))
                if unit in MODALITIES:
                    terms = _modality_batch(ensemble, unit, dataset.inputs[indices], delta, tau, psr_db, h_a, rng, config, cfg)
                else:
                    terms = _task_batch(ensemble, unit, task_inputs(dataset, indices), delta, tau, psr_db, h_a, rng, config, cfg)

                l_ds = _mean_loss_ds(discriminator, terms.clean_mapped, terms.perturbed_mapped)
                l_dv = loss_dv(delta, delta_other)
                objective = terms.rx - l_ds * beta_ds + l_dv * beta_dv
                if terms.cls is not None:
                    objective = objective + terms.cls * config.beta_cls
                if not math.isfinite(objective.item()):
                    raise DivergenceError(f"{name}: objective became {objective.item()} at epoch {epoch + 1}, {unit} batch {batch_index + 1}")

                g_optimizer.zero_grad()
                (-objective).backward()
                g_optimizer.step()

                if config.stealth:
                    d_loss = -_mean_loss_ds(discriminator, terms.clean_mapped, [p.detach() for p in terms.perturbed_mapped])
                    d_optimizer.zero_grad()
                    d_loss.backward()
                    d_optimizer.step()

                sums["objective"] += objective.item()
                sums["rx"] += terms.rx.item()
                sums["cls"] += terms.cls.item() if terms.cls is not None else 0.0
                sums["ds"] += l_ds.item()
                sums["dv"] += l_dv.item()
                batches += 1
                logger.debug(f"{name} epoch {epoch + 1} {unit} batch {batch_index + 1}: objective {objective.item():.5f}")
        history.append({key: value / max(batches, 1) for key, value in sums.items()})
        logger.info(f"{name} epoch {epoch + 1}/{config.epochs}: " + ", ".join(f"{k}={v:.4f}" for k, v in history[-1].items()))

    duration = (datetime.now(pytz.UTC) - start_time).total_seconds()
    logger.info(f"✓ {name} generator trained in {duration:.1f}s")
    return PgmTrainingResult(pgm, discriminator, history, duration)


# ---------------------------------------------------------------------------
# Trained UAP baselines
# ---------------------------------------------------------------------------


UAP_MODES = ("vanilla", "sync-free")


@dataclass
class UniversalPerturbation:
    delta: np.ndarray  # complex (N_g, n_fft)
    mode: str
    modality: str
    constellation: str


def train_uap(
    ensemble: SurrogateEnsemble,
    mode: str,
    modality: str,
    constellation: str,
    config: PgmTrainingConfig = PgmTrainingConfig(),
    seed: int = 0,
    cfg: OfdmConfig = OfdmConfig(),
) -> UniversalPerturbation:
    """
    A single learned grid for one modality and one constellation. ``vanilla`` trains
    without any transformation randomisation; ``sync-free`` randomises phi and delta_t.
    """
    if mode not in UAP_MODES:
        raise AttackError(f"unknown UAP mode '{mode}', expected one of {UAP_MODES}")
    low, high = config.psr_range
    name = f"{mode}-uap"
    rng = stream(seed, name, modality, constellation)
    delta = Tensor(rng.standard_normal((config.n_rows, cfg.n_fft, 2)) * 0.1, requires_grad=True, name="delta")
    optimizer = Adam({"delta": delta}, lr=config.lr * 10)
    dataset = ensemble.datasets[modality]
    for epoch in range(config.epochs):
        losses = []
        for batch_index, indices in enumerate(dataset.batches(config.batch_size, rng)):
            if config.batches_per_epoch is not None and batch_index >= config.batches_per_epoch:
                break
            codec = ensemble.sample_codec(rng, modality, (constellation,))
            x = dataset.inputs[indices]
            psr_db = float(rng.uniform(low, high))
            h_a = ensemble.sample_attacker_channel(rng)
            tau = TransformParams(mu=config.mu)
            if mode == "sync-free":
                offsets = random_params(rng, config.mu, cfg)
                tau = tau.with_offsets(offsets.phi, offsets.delta_t)
            gop = x.shape[1] if modality == "video" else 1
            draws = link_draws(rng, codec, x.shape[0], ensemble.settings, cfg, gop)
            output = forward_link(codec, x, draws, cfg, interference=graph_interference(delta, tau, psr_db, h_a, codec, cfg))
            loss = loss_rx(modality, x, output.reconstruction)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"{name}: loss became {loss.item()} at epoch {epoch + 1}, batch {batch_index + 1}")
            optimizer.zero_grad()
            (-loss).backward()
            optimizer.step()
            losses.append(loss.item())
        logger.info(f"{name} ({modality}, {constellation}) epoch {epoch + 1}/{config.epochs}: L_rx {np.mean(losses):.5f}")
    return UniversalPerturbation(ad.to_complex(delta.data), mode, modality, constellation)


# ---------------------------------------------------------------------------
# Perturbation sources for evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Perturbation:
    """One attacker draw: the untransformed grid and tau (epsilon filled in per transmission)."""

    kind: str
    delta: np.ndarray
    tau: TransformParams

    def realize(self, epsilon: float, tau: TransformParams | None = None) -> np.ndarray:
        tau = (tau or self.tau).with_epsilon(epsilon)
        if self.kind == "none":
            return np.zeros_like(self.delta, dtype=np.complex128)
        if self.kind == "random":
            return scale_to_budget(self.delta, epsilon)
        return apply_transform(self.delta, tau)


class PerturbationSource:
    """Draws Perturbations for one baseline."""

    def __init__(
        self,
        kind: str,
        mu: int = 3,
        n_rows: int = 4,
        pgm: Pgm | None = None,
        uap: UniversalPerturbation | None = None,
        cfg: OfdmConfig = OfdmConfig(),
    ):
        if kind not in BASELINES:
            raise AttackError(f"unknown baseline '{kind}', expected one of {BASELINES}")
        if kind == "magmaw" and pgm is None:
            raise AttackError("the magmaw baseline needs a trained generator")
        if kind in ("vanilla-uap", "sync-free-uap") and uap is None:
            raise AttackError(f"the {kind} baseline needs a trained universal perturbation")
        self.kind = kind
        self.mu = mu
        self.n_rows = n_rows
        self.pgm = pgm
        self.uap = uap
        self.cfg = cfg

    def draw(self, rng: np.random.Generator) -> Perturbation:
        neutral = TransformParams(mu=self.mu)
        if self.kind == "none":
            return Perturbation("none", np.zeros((self.mu * self.n_rows, self.cfg.n_fft), dtype=np.complex128), neutral)
        if self.kind == "random":
            return Perturbation("random", complex_gaussian(rng, (self.mu * self.n_rows, self.cfg.n_fft), 1.0), neutral)
        if self.kind == "vanilla-uap":
            return Perturbation(self.kind, self.uap.delta, neutral)
        if self.kind == "sync-free-uap":
            offsets = random_params(rng, self.mu, self.cfg)
            return Perturbation(self.kind, self.uap.delta, neutral.with_offsets(offsets.phi, offsets.delta_t))
        z = sample_latent(rng, self.pgm.latent_dim)[0]
        return Perturbation(self.kind, generate(self.pgm, z), random_params(rng, self.mu, self.cfg))


def payload_energy_epsilon(grid: np.ndarray, psr_db: float, cfg: OfdmConfig = OfdmConfig()) -> float:
    return psr_to_epsilon(payload_samples(ofdm_modulate(grid, cfg), cfg), psr_db)


@dataclass(frozen=True)
class Injection:
    """What a receiver-side defense may know about one injected transmission."""

    perturbation: Perturbation
    epsilon: float
    h_a: np.ndarray
    rows: int


Defense = Callable[[np.ndarray, Injection], np.ndarray]


@dataclass
class InjectionLog:
    measured_psr_db: list[float] = field(default_factory=list)
    perturbations: list[np.ndarray] = field(default_factory=list)
    attack_energy: list[float] = field(default_factory=list)
    residual_energy: list[float] = field(default_factory=list)
    budget_share: list[float] = field(default_factory=list)  # energy on the victim rows over epsilon


def attack_channel(
    perturbation: Perturbation,
    psr_db: float,
    h_a: np.ndarray,
    cfg: OfdmConfig = OfdmConfig(),
    log: InjectionLog | None = None,
    defend: Defense | None = None,
) -> Callable[[int, np.ndarray, LinkDraw], np.ndarray]:
    """
    numpy channel callback injecting ``perturbation`` at ``psr_db`` per transmission.
    ``defend(received, injection)`` post-processes each received grid; the log then
    also records the residual energy left on top of the clean channel output.
    """

    def channel(step: int, grid: np.ndarray, draw: LinkDraw) -> np.ndarray:
        received = []
        for b in range(grid.shape[0]):
            epsilon = payload_energy_epsilon(grid[b], psr_db, cfg)
            realized = perturbation.realize(epsilon)[: grid.shape[-2]]
            rx = inject(grid[b], draw.channel.freq_response[b, 0], h_a, realized, draw.noise[b])
            if defend is not None:
                rx = defend(rx, Injection(perturbation, epsilon, h_a, grid.shape[-2]))
            if log is not None:
                clean = draw.channel.freq_response[b, 0] * grid[b] + draw.noise[b]
                log.attack_energy.append(signal_energy(h_a * realized))
                log.residual_energy.append(signal_energy(rx - clean))
                if perturbation.kind != "none":
                    victim = payload_samples(ofdm_modulate(grid[b], cfg), cfg)
                    log.measured_psr_db.append(measure_psr(victim, payload_samples(ofdm_modulate(realized, cfg), cfg)))
                    log.perturbations.append(realized)
                    log.budget_share.append(signal_energy(realized) / epsilon)
            received.append(rx)
        return np.stack(received)

    return channel


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSetup:
    settings: ChannelSettings
    attacker_channels: np.ndarray
    seed: int = 0
    scenario: str = "los"
    trials: int = 200
    workers: int = 4
    cfg: OfdmConfig = field(default_factory=OfdmConfig)

    def __post_init__(self):
        if self.trials < 1:
            raise AttackError(f"evaluation needs at least one trial, got {self.trials}")


def trial_stream(setup: EvalSetup, *names) -> np.random.Generator:
    return stream(setup.seed, "eval", setup.scenario, *names)


def run_trials(function: Callable[[int], dict], trials: int, workers: int) -> list[dict]:
    """Run ``function`` per trial index, results ordered by index regardless of scheduling."""
    results: list[dict | None] = [None] * trials
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(function, index): index for index in range(trials)}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return results


def _p_value(better: np.ndarray, worse: np.ndarray) -> float | None:
    """One-sided paired t-test that ``better`` exceeds ``worse``; None when undefined."""
    if len(better) < 2 or np.allclose(better, worse):
        return None
    statistic = ttest_rel(better, worse, alternative="greater")
    return None if math.isnan(statistic.pvalue) else float(statistic.pvalue)


def _modality_trial(
    index: int,
    modality: str,
    codecs: list[JsccCodec],
    dataset: SyntheticDataset,
    sources: dict[str, PerturbationSource],
    psr_db: float,
    setup: EvalSetup,
) -> dict:
    psr_key = f"{psr_db:g}"
    link_rng = trial_stream(setup, modality, psr_key, index, "link")
    codec = codecs[index % len(codecs)]
    item = int(link_rng.integers(0, len(dataset)))
    x = dataset.inputs[item : item + 1]
    gop = x.shape[1] if modality == "video" else 1
    draws = link_draws(link_rng, codec, 1, setup.settings, setup.cfg, gop)
    h_a = setup.attacker_channels[int(link_rng.integers(0, len(setup.attacker_channels)))]
    metric, clean = quality_scores(modality, x, run_link(codec, x, draws, setup.cfg))
    outcome = {"metric": metric, "clean": float(clean[0]), "attacked": {}, "psr": {}, "share": {}}
    for baseline, source in sources.items():
        perturbation = source.draw(trial_stream(setup, modality, psr_key, index, baseline))
        log = InjectionLog()
        attacked = run_link(codec, x, draws, setup.cfg, channel=attack_channel(perturbation, psr_db, h_a, setup.cfg, log))
        _, score = quality_scores(modality, x, attacked)
        outcome["attacked"][baseline] = float(score[0])
        outcome["psr"][baseline] = max(log.measured_psr_db) if log.measured_psr_db else -math.inf
        if log.budget_share:
            outcome["share"][baseline] = float(np.mean(log.budget_share))
    return outcome


def eval_attack(
    sources: dict[str, PerturbationSource],
    target_codecs: list[JsccCodec],
    datasets: dict[str, SyntheticDataset],
    psr_db: float,
    setup: EvalSetup,
    target_downstream: dict[str, Classifier] | None = None,
) -> list[dict]:
    """
    Rows per (modality, baseline) at one PSR: mean clean and attacked quality, mean
    degradation, worst measured PSR and paired p-values against the random baseline
    and, for magmaw, against vanilla-uap.
    Downstream tasks add per-baseline untargeted success rates.
    """
    if not target_codecs:
        raise AttackError("no target codecs to evaluate")
    rows = []
    for modality in MODALITIES:
        codecs = [c for c in target_codecs if c.modality == modality]
        if not codecs or modality not in datasets:
            continue
        outcomes = run_trials(lambda i: _modality_trial(i, modality, codecs, datasets[modality], sources, psr_db, setup), setup.trials, setup.workers)
        metric = outcomes[0]["metric"]
        clean = np.array([o["clean"] for o in outcomes])
        degradations = {b: degradation(metric, clean, np.array([o["attacked"][b] for o in outcomes])) for b in sources}
        shares = {b: float(np.mean([o["share"][b] for o in outcomes])) for b in sources if b in outcomes[0]["share"]}
        for baseline in sources:
            attacked = np.array([o["attacked"][baseline] for o in outcomes])
            rows.append(
                {
                    "scenario": setup.scenario,
                    "modality": modality,
                    "psr_db": psr_db,
                    "baseline": baseline,
                    "metric": metric,
                    "clean": float(clean.mean()),
                    "attacked": float(attacked.mean()),
                    "degradation": float(degradations[baseline].mean()),
                    "measured_psr_db": max(o["psr"][baseline] for o in outcomes),
                    "budget_share": shares.get(baseline),
                    "p_value_vs_random": _p_value(degradations[baseline], degradations["random"])
                    if "random" in degradations and baseline not in ("none", "random")
                    else None,
                    "p_value_vs_vanilla": _p_value(degradations[baseline], degradations["vanilla-uap"])
                    if baseline == "magmaw" and "vanilla-uap" in degradations
                    else None,
                    "trials": setup.trials,
                    "seed": setup.seed,
                }
            )
        logger.info(f"✓ {setup.scenario}/{modality} @ {psr_db:g} dB: " + ", ".join(f"{b}={degradations[b].mean():.4f}" for b in sources))
        if shares:
            # rows past the victim's grid are dropped after the budget is spent
            logger.info(f"  {modality}: share of epsilon on victim rows " + ", ".join(f"{b}={s:.3f}" for b, s in shares.items()))

    for task, classifier in (target_downstream or {}).items():
        if task not in datasets:
            continue
        rows.extend(eval_downstream(sources, target_codecs, classifier, datasets[task], psr_db, setup))
    return rows


def _task_codecs(codecs: list[JsccCodec], task: str, index: int) -> dict[str, JsccCodec]:
    chosen = {}
    for modality in TASK_CODECS[task]:
        candidates = [c for c in codecs if c.modality == modality]
        if not candidates:
            raise AttackError(f"task '{task}' needs a {modality} codec")
        chosen[modality] = candidates[index % len(candidates)]
    return chosen


def _task_trial(
    index: int,
    task: str,
    codecs: list[JsccCodec],
    classifier: Classifier,
    dataset: SyntheticDataset,
    sources: dict[str, PerturbationSource],
    psr_db: float,
    setup: EvalSetup,
    target_class: int | None,
) -> dict:
    psr_key = f"{psr_db:g}"
    link_rng = trial_stream(setup, task, psr_key, index, "link")
    chosen = _task_codecs(codecs, task, index)
    item = int(link_rng.integers(0, len(dataset)))
    inputs = task_inputs(dataset, np.array([item]))
    frames = inputs[0].shape[1] if task == "vc" else 1
    draws = task_draws(task, chosen, 1, frames, link_rng, setup.settings, setup.cfg)
    h_a = setup.attacker_channels[int(link_rng.integers(0, len(setup.attacker_channels)))]
    _, clean_class = classify(classifier, task_link_numpy(task, chosen, inputs, draws, setup.cfg))
    records = {}
    for baseline, source in sources.items():
        perturbation = source.draw(trial_stream(setup, task, psr_key, index, baseline))
        channel = attack_channel(perturbation, psr_db, h_a, setup.cfg)
        attacked = task_link_numpy(task, chosen, inputs, draws, setup.cfg, channel_for=lambda codec, channel=channel: channel)
        probs, predicted = classify(classifier, attacked)
        if target_class is None:
            loss = float(untargeted_margin(probs, clean_class).data[0])
        else:
            loss = float(targeted_margin(probs, target_class).data[0])
        records[baseline] = AttackRecord(loss, int(predicted[0]), target_class)
    return records


def eval_downstream(
    sources: dict[str, PerturbationSource],
    target_codecs: list[JsccCodec],
    classifier: Classifier,
    dataset: SyntheticDataset,
    psr_db: float,
    setup: EvalSetup,
    target_class: int | None = None,
) -> list[dict]:
    """Success-rate rows per baseline for one downstream task (targeted when ``target_class`` is set)."""
    task = classifier.task
    outcomes = run_trials(
        lambda i: _task_trial(i, task, target_codecs, classifier, dataset, sources, psr_db, setup, target_class), setup.trials, setup.workers
    )
    rows = []
    for baseline in sources:
        records = [o[baseline] for o in outcomes]
        agreement = np.mean([(r.loss > 0) == (r.predicted == target_class) for r in records]) if target_class is not None else None
        rows.append(
            {
                "scenario": setup.scenario,
                "modality": task,
                "psr_db": psr_db,
                "baseline": baseline,
                "metric": "success_rate" if target_class is None else f"targeted_success_rate_c{target_class}",
                "clean": None,
                "attacked": attack_success_rate(records),
                "degradation": attack_success_rate(records),
                "measured_psr_db": None,
                "budget_share": None,
                "p_value_vs_random": None,
                "p_value_vs_vanilla": None,
                "trials": setup.trials,
                "seed": setup.seed,
                "rule_agreement": None if agreement is None else float(agreement),
            }
        )
    logger.info(f"✓ {setup.scenario}/{task} @ {psr_db:g} dB: " + ", ".join(f"{r['baseline']}={r['attacked']:.3f}" for r in rows))
    return rows


def eval_targeted(
    sources: dict[str, PerturbationSource],
    target_codecs: list[JsccCodec],
    classifier: Classifier,
    dataset: SyntheticDataset,
    psr_db: float,
    setup: EvalSetup,
    target_class: int,
) -> list[dict]:
    if not 0 <= target_class < classifier.classes:
        raise AttackError(f"target class {target_class} outside 0..{classifier.classes - 1}")
    return eval_downstream(sources, target_codecs, classifier, dataset, psr_db, setup, target_class)
