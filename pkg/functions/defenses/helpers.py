"""
Receiver-side defenses: adversarial training of a codec against a defender-owned
generator, perturbation subtraction, a trained perturbation detector, and oracle
subtraction with and without synchronisation. Evaluation helpers emit one row per
(modality, defense) or (modality, attacker, stage) at a given PSR.
"""

from collections.abc import Callable
from dataclasses import dataclass, field
from datetime import datetime
from functools import partial
import logging
import math

import numpy as np
import pytz

from functions.attack.helpers import (
    EvalSetup,
    Injection,
    InjectionLog,
    Perturbation,
    PerturbationSource,
    PgmTrainingConfig,
    SurrogateEnsemble,
    attack_channel,
    graph_interference,
    run_trials,
    train_pgm,
    trial_stream,
)
from functions.attack.models import Pgm, generate, sample_latent
from functions.attack.transform import TransformParams, apply_transform, random_params
from functions.data.helpers import SyntheticDataset
from functions.defenses.models import DetectorModel
from functions.jscc.helpers import (
    QUALITY_METRICS,
    ChannelSettings,
    LinkDraw,
    channel_output,
    forward_link,
    link_draws,
    quality_scores,
    reconstruction_loss,
    restore_codec,
    run_link,
    validation_loss,
)
from functions.jscc.models import MODALITIES, JsccCodec
from functions.metrics.helpers import accuracy, auc_roc
from functions.phy.helpers import OfdmConfig, equalize, map_data_subcarriers, sample_channel
from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import DatasetError, DefenseError, DivergenceError, ShapeError
from shared.optim import Adam
from shared.rng import stream


logger = logging.getLogger(__name__)

DEFENSES = ("none", "adversarial-training", "perturbation-subtraction", "oracle-synced", "oracle-unsynced")


# ---------------------------------------------------------------------------
# Defender generator
# ---------------------------------------------------------------------------


@dataclass
class DefenderPgm:
    """A generator with the attacker's architecture and independently trained parameters."""

    pgm: Pgm
    mu: int = 3

    def draw(self, rng: np.random.Generator, cfg: OfdmConfig = OfdmConfig()) -> tuple[np.ndarray, TransformParams]:
        """The defender's own latent z and transformation tau."""
        return sample_latent(rng, self.pgm.latent_dim)[0], random_params(rng, self.mu, cfg)

    def source(self, cfg: OfdmConfig = OfdmConfig()) -> PerturbationSource:
        return PerturbationSource("magmaw", self.mu, self.pgm.n_rows, pgm=self.pgm, cfg=cfg)


def build_defender_pgm(
    ensemble: SurrogateEnsemble,
    attacker: Pgm,
    config: PgmTrainingConfig = PgmTrainingConfig(),
    seed: int = 0,
    cfg: OfdmConfig = OfdmConfig(),
) -> DefenderPgm:
    """Train a defender generator on the surrogate ensemble; its architecture must match ``attacker``."""
    result = train_pgm(ensemble, config, seed, cfg, name="defender")
    if result.pgm.descriptor() != attacker.descriptor():
        raise DefenseError(f"defender generator {result.pgm.descriptor()} does not match the attacker's {attacker.descriptor()}")
    return DefenderPgm(result.pgm, config.mu)


# ---------------------------------------------------------------------------
# Adversarial training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdversarialBatch:
    """Stored P_tau(G(z)) for one batch of dataset items; epsilon is set per transmission."""

    indices: np.ndarray
    delta: np.ndarray  # complex (N_g, n_fft)
    tau: TransformParams
    psr_db: float
    h_a: np.ndarray


@dataclass
class AdversarialTrainingResult:
    codec: JsccCodec
    epoch_losses: list[float]
    dataset_sizes: list[int]
    clean_val_loss: float
    adversarial_batches: list[AdversarialBatch] = field(default_factory=list)
    duration_seconds: float = 0.0


def adversarial_train(
    codec: JsccCodec,
    dataset: SyntheticDataset,
    defender: DefenderPgm,
    attacker_channels: np.ndarray,
    settings: ChannelSettings = ChannelSettings(),
    epochs: int = 5,
    seed: int = 0,
    psr_range: tuple[float, float] = (-20.0, -10.0),
    batch_size: int = 16,
    lr: float = 1e-3,
    cfg: OfdmConfig = OfdmConfig(),
) -> AdversarialTrainingResult:
    """
    Harden a copy of ``codec``. Each epoch draws one H_t and one H_a; every clean batch
    is trained on and paired with a fresh defender perturbation, and those pairs join
    the training set from the next epoch on.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot adversarially train on an empty dataset")
    start_time = datetime.now(pytz.UTC)
    hardened = restore_codec({**codec.descriptor(), "role": "hardened"}, codec.network.state_dict())
    rng = stream(seed, "adversarial-train", codec.key.slug)
    optimizer = Adam(hardened.network.named_parameters(), lr=lr)
    stored: list[AdversarialBatch] = []
    epoch_losses, dataset_sizes = [], []
    logger.info(f"Adversarial training of {codec.key.slug} for {epochs} epoch(s)")

    for epoch in range(epochs):
        taps = sample_channel(rng, settings.n_taps, settings.decay, n_fft=cfg.n_fft).taps
        h_a = attacker_channels[int(rng.integers(0, len(attacker_channels)))]
        fresh: list[AdversarialBatch] = []
        work: list[tuple[np.ndarray, AdversarialBatch | None]] = [(indices, None) for indices in dataset.batches(batch_size, rng)]
        work += [(batch.indices, batch) for batch in stored]
        order = rng.permutation(len(work))
        losses = []
        for position, index in enumerate(order):
            indices, adversarial = work[index]
            x = dataset.inputs[indices]
            gop = x.shape[1] if codec.modality == "video" else 1
            draws = link_draws(rng, hardened, len(indices), settings, cfg, gop, taps=taps)
            interference = None
            if adversarial is not None:
                delta = Tensor(ad.to_pair(adversarial.delta))
                interference = graph_interference(delta, adversarial.tau, adversarial.psr_db, adversarial.h_a, hardened, cfg)
            output = forward_link(hardened, x, draws, cfg, interference=interference)
            loss = reconstruction_loss(codec.modality, x, output.reconstruction)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"{codec.key.slug} (hardened): loss became {loss.item()} at epoch {epoch + 1}, step {position + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

            if adversarial is None:
                z, tau = defender.draw(rng, cfg)
                psr_db = float(rng.uniform(*psr_range))
                fresh.append(AdversarialBatch(indices, generate(defender.pgm, z), tau, psr_db, h_a))
        stored.extend(fresh)
        epoch_losses.append(float(np.mean(losses)))
        dataset_sizes.append(len(dataset) + sum(len(batch.indices) for batch in stored))
        logger.info(f"{codec.key.slug} (hardened) epoch {epoch + 1}/{epochs}: loss {epoch_losses[-1]:.5f}, {dataset_sizes[-1]} examples")

    clean_val = validation_loss(hardened, dataset, settings, seed, cfg, batch_size)
    duration = (datetime.now(pytz.UTC) - start_time).total_seconds()
    logger.info(f"✓ {codec.key.slug} hardened: clean val loss {clean_val:.5f} in {duration:.1f}s")
    return AdversarialTrainingResult(hardened, epoch_losses, dataset_sizes, clean_val, stored, duration)


# ---------------------------------------------------------------------------
# Subtraction defenses
# ---------------------------------------------------------------------------


def subtract(received: np.ndarray, estimate: np.ndarray, h_a: np.ndarray) -> np.ndarray:
    """received - H_a * estimate, with ``estimate`` truncated to the received rows."""
    received = np.asarray(received, dtype=np.complex128)
    estimate = np.asarray(estimate, dtype=np.complex128)
    rows = received.shape[-2]
    if estimate.shape[-2] < rows or estimate.shape[-1] != received.shape[-1]:
        raise ShapeError(f"cannot subtract a {estimate.shape} estimate from a {received.shape} grid")
    return received - np.asarray(h_a) * estimate[..., :rows, :]


def perturbation_subtract(
    received: np.ndarray,
    defender: DefenderPgm,
    z_def: np.ndarray,
    tau_def: TransformParams,
    h_a_est: np.ndarray,
) -> np.ndarray:
    """Subtract the defender's own guess H_a_est P_tau_def(G_def(z_def))."""
    return subtract(received, apply_transform(generate(defender.pgm, z_def), tau_def), h_a_est)


def subtraction_defense(
    defender: DefenderPgm,
    rng: np.random.Generator,
    attacker_channels: np.ndarray,
    cfg: OfdmConfig = OfdmConfig(),
) -> Callable[[np.ndarray, Injection], np.ndarray]:
    """
    Defense hook for ``attack_channel``. The defender knows the attack budget and the
    attacker-channel distribution, so it draws H_a_est from that distribution and its
    own (z, tau) per transmission.
    """

    def defend(received: np.ndarray, injection: Injection) -> np.ndarray:
        z, tau = defender.draw(rng, cfg)
        h_a_est = attacker_channels[int(rng.integers(0, len(attacker_channels)))]
        return perturbation_subtract(received, defender, z, tau.with_epsilon(injection.epsilon), h_a_est)

    return defend


def oracle_defend(
    received: np.ndarray,
    delta: np.ndarray,
    tau: TransformParams,
    h_a: np.ndarray,
    synced: bool = True,
    rng: np.random.Generator | None = None,
    guess: tuple[float, int] | None = None,
    cfg: OfdmConfig = OfdmConfig(),
) -> np.ndarray:
    """
    Subtract the attacker's exact H_a P_tau(delta). Without synchronisation phi and
    delta_t are replaced by ``guess`` or by uniform draws from ``rng``.
    """
    if not synced:
        if guess is None:
            if rng is None:
                raise DefenseError("an unsynchronised oracle needs a random stream or an explicit guess")
            offsets = random_params(rng, tau.mu, cfg)
            guess = (offsets.phi, offsets.delta_t)
        tau = tau.with_offsets(*guess)
    return subtract(received, apply_transform(delta, tau), h_a)


def oracle_defense(
    synced: bool,
    rng: np.random.Generator | None = None,
    cfg: OfdmConfig = OfdmConfig(),
) -> Callable[[np.ndarray, Injection], np.ndarray]:
    def defend(received: np.ndarray, injection: Injection) -> np.ndarray:
        perturbation = injection.perturbation
        tau = perturbation.tau.with_epsilon(injection.epsilon)
        return oracle_defend(received, perturbation.delta, tau, injection.h_a, synced, rng, cfg=cfg)

    return defend


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


def capture_channel(
    sink: list[np.ndarray],
    constellation: str,
    channel: Callable[[int, np.ndarray, LinkDraw], np.ndarray] | None = None,
    cfg: OfdmConfig = OfdmConfig(),
) -> Callable[[int, np.ndarray, LinkDraw], np.ndarray]:
    """Wrap a channel callback, appending each transmission's mapped equalised data pairs to ``sink``."""
    data = list(cfg.data_subcarriers)

    def wrapped(step: int, grid: np.ndarray, draw: LinkDraw) -> np.ndarray:
        received = channel(step, grid, draw) if channel is not None else channel_output(grid, draw)
        mapped = map_data_subcarriers(equalize(received, draw.h_est, cfg), constellation, cfg)
        sink.append(ad.to_pair(mapped[..., data]))
        return received

    return wrapped


def collect_grids(
    codec: JsccCodec,
    dataset: SyntheticDataset,
    source: PerturbationSource,
    psr_db: float,
    settings: ChannelSettings,
    attacker_channels: np.ndarray,
    count: int,
    seed: int,
    label: str,
    cfg: OfdmConfig = OfdmConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Paired clean and perturbed detector inputs (N, N_s, 48, 2) from ``count`` items over identical draws."""
    if count < 1:
        raise DatasetError("need at least one item to collect detector grids")
    clean_sink: list[np.ndarray] = []
    perturbed_sink: list[np.ndarray] = []
    for index in range(count):
        rng = stream(seed, "detector-data", label, codec.key.slug, f"{psr_db:g}", index)
        item = int(rng.integers(0, len(dataset)))
        x = dataset.inputs[item : item + 1]
        gop = x.shape[1] if codec.modality == "video" else 1
        draws = link_draws(rng, codec, 1, settings, cfg, gop)
        h_a = attacker_channels[int(rng.integers(0, len(attacker_channels)))]
        perturbation = source.draw(rng)
        run_link(codec, x, draws, cfg, channel=capture_channel(clean_sink, codec.constellation, cfg=cfg))
        attacked = attack_channel(perturbation, psr_db, h_a, cfg)
        run_link(codec, x, draws, cfg, channel=capture_channel(perturbed_sink, codec.constellation, attacked, cfg))
    return np.concatenate(clean_sink), np.concatenate(perturbed_sink)


@dataclass
class DetectorTrainingResult:
    detector: DetectorModel
    epoch_losses: list[float]
    train_accuracy: float


def _labelled(clean: np.ndarray, perturbed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(clean) == 0 or len(perturbed) == 0:
        raise DatasetError("detector training needs both clean and perturbed grids")
    grids = np.concatenate([clean, perturbed])
    labels = np.concatenate([np.zeros(len(clean)), np.ones(len(perturbed))])
    return grids, labels


def binary_cross_entropy(scores: Tensor, labels: np.ndarray) -> Tensor:
    return -ad.mean(ad.log(scores) * labels + ad.log(1.0 - scores) * (1.0 - labels))


def detection_scores(detector: DetectorModel, grids: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return detector(np.asarray(grids, dtype=np.float64)).data.copy()


def detect(detector: DetectorModel, grid: np.ndarray) -> tuple[float, bool]:
    """Score of a single (N_s, 48, 2) grid and whether it is flagged."""
    score = float(detection_scores(detector, np.asarray(grid)[None])[0])
    return score, score >= detector.threshold


def _accuracy(detector: DetectorModel, grids: np.ndarray, labels: np.ndarray) -> float:
    flagged = (detection_scores(detector, grids) >= detector.threshold).astype(np.int64)
    return accuracy(flagged, labels.astype(np.int64))


def _fit(
    detector: DetectorModel,
    grids: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int,
    lr: float,
    keep_best: bool,
) -> list[float]:
    optimizer = Adam(detector.named_parameters(), lr=lr)
    best_accuracy = _accuracy(detector, grids, labels) if keep_best else -1.0
    best_state = detector.state_dict()
    losses = []
    for epoch in range(epochs):
        epoch_loss = []
        order = rng.permutation(len(grids))
        for start in range(0, len(grids), batch_size):
            batch = order[start : start + batch_size]
            loss = binary_cross_entropy(detector(grids[batch]), labels[batch])
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"detector: loss became {loss.item()} at epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss.append(loss.item())
        losses.append(float(np.mean(epoch_loss)))
        if keep_best:
            current = _accuracy(detector, grids, labels)
            if current >= best_accuracy:
                best_accuracy, best_state = current, detector.state_dict()
        logger.debug(f"detector epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}")
    if keep_best:
        detector.load_state_dict(best_state)
    return losses


def train_detector(
    detector: DetectorModel,
    clean_grids: np.ndarray,
    perturbed_grids: np.ndarray,
    epochs: int = 10,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> DetectorTrainingResult:
    """Offline binary cross-entropy training, perturbed = 1."""
    grids, labels = _labelled(clean_grids, perturbed_grids)
    losses = _fit(detector, grids, labels, epochs, stream(seed, "detector-train"), batch_size, lr, keep_best=False)
    train_accuracy = _accuracy(detector, grids, labels)
    logger.info(f"✓ detector trained on {len(grids)} grids: train accuracy {train_accuracy:.3f}")
    return DetectorTrainingResult(detector, losses, train_accuracy)


def fine_tune(
    detector: DetectorModel,
    clean_grids: np.ndarray,
    new_perturbed: np.ndarray,
    epochs: int = 5,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 5e-4,
) -> DetectorTrainingResult:
    """
    Continue training on newly collected (simulator-labelled) perturbed grids plus clean
    ones. The epoch with the best accuracy on that set is kept, starting from the
    current parameters, so accuracy on it never drops.
    """
    grids, labels = _labelled(clean_grids, new_perturbed)
    before = _accuracy(detector, grids, labels)
    losses = _fit(detector, grids, labels, epochs, stream(seed, "detector-fine-tune"), batch_size, lr, keep_best=True)
    after = _accuracy(detector, grids, labels)
    logger.info(f"✓ detector fine-tuned on {len(grids)} grids: accuracy {before:.3f} -> {after:.3f}")
    return DetectorTrainingResult(detector, losses, after)


def detection_report(detector: DetectorModel, clean_grids: np.ndarray, perturbed_grids: np.ndarray) -> dict[str, float]:
    clean_scores = detection_scores(detector, clean_grids)
    perturbed_scores = detection_scores(detector, perturbed_grids)
    return {
        "auc": auc_roc(perturbed_scores, clean_scores),
        "detection_rate": float(np.mean(perturbed_scores >= detector.threshold)),
        "false_positive_rate": float(np.mean(clean_scores >= detector.threshold)),
    }


@dataclass(frozen=True)
class DetectionBudget:
    offline_items: int = 64
    online_items: int = 32
    test_items: int = 64
    epochs: int = 10
    fine_tune_epochs: int = 5


def eval_detection(
    codec: JsccCodec,
    dataset: SyntheticDataset,
    defender: DefenderPgm,
    attackers: dict[str, PerturbationSource],
    psr_db: float,
    setup: EvalSetup,
    budget: DetectionBudget = DetectionBudget(),
) -> list[dict]:
    """
    Per attacker: a detector trained offline on defender-generated perturbations, then
    fine-tuned on attacker-perturbed grids, scored on held-out attacker data before and
    after fine-tuning.
    """
    cfg = setup.cfg
    defender_source = defender.source(cfg)
    collect = partial(collect_grids, codec, dataset, settings=setup.settings, attacker_channels=setup.attacker_channels, seed=setup.seed, cfg=cfg)
    offline = collect(defender_source, psr_db, count=budget.offline_items, label="offline")
    rows = []
    for name, attacker in attackers.items():
        detector = DetectorModel(stream(setup.seed, "detector-init", codec.key.slug), codec.n_rows(cfg.n_data))
        train_detector(detector, *offline, epochs=budget.epochs, seed=setup.seed)
        online = collect(attacker, psr_db, count=budget.online_items, label=f"online-{name}")
        test = collect(attacker, psr_db, count=budget.test_items, label=f"test-{name}")
        stages = {"before-fine-tune": detection_report(detector, *test)}
        fine_tune(detector, *online, epochs=budget.fine_tune_epochs, seed=setup.seed)
        stages["after-fine-tune"] = detection_report(detector, *test)
        for stage, report in stages.items():
            rows.append(
                {
                    "scenario": setup.scenario,
                    "modality": codec.modality,
                    "codec": codec.key.slug,
                    "psr_db": psr_db,
                    "attacker": name,
                    "stage": stage,
                    **report,
                    "samples": len(test[0]) + len(test[1]),
                    "seed": setup.seed,
                }
            )
        before, after = stages["before-fine-tune"]["auc"], stages["after-fine-tune"]["auc"]
        logger.info(f"✓ detection {codec.key.slug} vs {name} @ {psr_db:g} dB: AUC {before:.3f} -> {after:.3f}")
    return rows


# ---------------------------------------------------------------------------
# Defense evaluation
# ---------------------------------------------------------------------------


def _defense_trial(
    index: int,
    modality: str,
    codecs: list[JsccCodec],
    hardened: dict[str, JsccCodec],
    dataset: SyntheticDataset,
    attacker: PerturbationSource,
    defender: DefenderPgm | None,
    psr_db: float,
    setup: EvalSetup,
    defenses: tuple[str, ...],
) -> dict:
    psr_key = f"{psr_db:g}"
    link_rng = trial_stream(setup, "defense", modality, psr_key, index, "link")
    codec = codecs[index % len(codecs)]
    item = int(link_rng.integers(0, len(dataset)))
    x = dataset.inputs[item : item + 1]
    gop = x.shape[1] if modality == "video" else 1
    draws = link_draws(link_rng, codec, 1, setup.settings, setup.cfg, gop)
    h_a = setup.attacker_channels[int(link_rng.integers(0, len(setup.attacker_channels)))]
    perturbation: Perturbation = attacker.draw(trial_stream(setup, "defense", modality, psr_key, index, "attacker"))

    def score(target: JsccCodec, channel=None) -> float:
        return float(quality_scores(modality, x, run_link(target, x, draws, setup.cfg, channel=channel))[1][0])

    no_attack = score(codec)
    attacked = score(codec, attack_channel(perturbation, psr_db, h_a, setup.cfg))
    outcome = {"no_attack": no_attack, "attacked": attacked, "defenses": {}}
    for defense in defenses:
        log = InjectionLog()
        defense_rng = trial_stream(setup, "defense", modality, psr_key, index, defense)
        defense_clean = no_attack
        if defense == "none":
            defended = score(codec, attack_channel(perturbation, psr_db, h_a, setup.cfg, log))
        elif defense == "adversarial-training":
            target = hardened.get(codec.key.slug)
            if target is None:
                raise DefenseError(f"no hardened codec for {codec.key.slug}")
            defense_clean = score(target)
            defended = score(target, attack_channel(perturbation, psr_db, h_a, setup.cfg, log))
        elif defense == "perturbation-subtraction":
            if defender is None:
                raise DefenseError("perturbation subtraction needs a defender generator")
            hook = subtraction_defense(defender, defense_rng, setup.attacker_channels, setup.cfg)
            defended = score(codec, attack_channel(perturbation, psr_db, h_a, setup.cfg, log, hook))
        elif defense in ("oracle-synced", "oracle-unsynced"):
            hook = oracle_defense(defense == "oracle-synced", defense_rng, setup.cfg)
            defended = score(codec, attack_channel(perturbation, psr_db, h_a, setup.cfg, log, hook))
        else:
            raise DefenseError(f"unknown defense '{defense}', expected one of {DEFENSES}")
        outcome["defenses"][defense] = {
            "defended": defended,
            "defense_clean": defense_clean,
            "attack_energy": float(np.sum(log.attack_energy)),
            "residual_energy": float(np.sum(log.residual_energy)),
        }
    return outcome


def eval_defenses(
    attacker: PerturbationSource,
    target_codecs: list[JsccCodec],
    datasets: dict[str, SyntheticDataset],
    psr_db: float,
    setup: EvalSetup,
    defender: DefenderPgm | None = None,
    hardened: dict[str, JsccCodec] | None = None,
    defenses: tuple[str, ...] = DEFENSES,
) -> list[dict]:
    """
    Rows per (modality, defense): mean quality without attack, under attack, under
    attack with the defense, the defended system's clean quality, and the ratio of
    residual to injected perturbation energy.
    """
    hardened = hardened or {}
    rows = []
    for modality in MODALITIES:
        codecs = [c for c in target_codecs if c.modality == modality]
        if not codecs or modality not in datasets:
            continue
        if "adversarial-training" in defenses and not all(c.key.slug in hardened for c in codecs):
            selected = tuple(d for d in defenses if d != "adversarial-training")
            logger.warning(f"No hardened codec for every {modality} target; skipping adversarial training rows")
        else:
            selected = defenses
        outcomes = run_trials(
            lambda i: _defense_trial(i, modality, codecs, hardened, datasets[modality], attacker, defender, psr_db, setup, selected),
            setup.trials,
            setup.workers,
        )
        metric = QUALITY_METRICS[modality]
        for defense in selected:
            attack_energy = sum(o["defenses"][defense]["attack_energy"] for o in outcomes)
            residual_energy = sum(o["defenses"][defense]["residual_energy"] for o in outcomes)
            rows.append(
                {
                    "scenario": setup.scenario,
                    "modality": modality,
                    "psr_db": psr_db,
                    "defense": defense,
                    "metric": metric,
                    "no_attack": float(np.mean([o["no_attack"] for o in outcomes])),
                    "attacked": float(np.mean([o["attacked"] for o in outcomes])),
                    "defended": float(np.mean([o["defenses"][defense]["defended"] for o in outcomes])),
                    "defense_clean": float(np.mean([o["defenses"][defense]["defense_clean"] for o in outcomes])),
                    "residual_power_ratio": residual_energy / attack_energy if attack_energy > 0 else None,
                    "trials": setup.trials,
                    "seed": setup.seed,
                }
            )
        defended = ", ".join(f"{r['defense']}={r['defended']:.4f}" for r in rows if r["modality"] == modality)
        logger.info(f"✓ defenses {setup.scenario}/{modality} @ {psr_db:g} dB: {defended}")
    return rows
