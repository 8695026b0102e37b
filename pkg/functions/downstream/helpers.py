"""
Downstream tasks on JSCC reconstructions: classification, margin losses (untargeted and
targeted, on post-softmax probabilities), success accounting, classifier training and
the task-level transmission helpers shared by attacks and defenses.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from datetime import datetime
import logging
import math

import numpy as np
import pytz

from functions.data.helpers import SyntheticDataset
from functions.downstream.models import Classifier
from functions.jscc.helpers import ChannelSettings, Interference, LinkDraw, forward_link, link_draws, reconstruction_loss, run_link
from functions.jscc.models import JsccCodec
from functions.metrics.helpers import accuracy
from functions.phy.helpers import OfdmConfig
from shared import autodiff as ad
from shared.autodiff import Tensor
from shared.errors import DatasetError, DivergenceError, MetricError, ShapeError
from shared.optim import Adam
from shared.rng import stream


logger = logging.getLogger(__name__)

TASK_CODECS = {"vc": ("video",), "ave": ("image", "speech")}


def task_inputs(dataset: SyntheticDataset, indices: np.ndarray | None = None) -> tuple[np.ndarray, ...]:
    indices = np.arange(len(dataset)) if indices is None else indices
    if dataset.kind == "vc":
        return (dataset.inputs[indices],)
    if dataset.kind == "ave":
        if dataset.audio is None:
            raise DatasetError("AVE dataset has no audio branch")
        return (dataset.inputs[indices], dataset.audio[indices])
    raise DatasetError(f"dataset kind '{dataset.kind}' is not a downstream task")


# ---------------------------------------------------------------------------
# Classification and margins
# ---------------------------------------------------------------------------


def probabilities(clf: Classifier, inputs: tuple) -> Tensor:
    return ad.softmax(clf.logits(inputs), axis=-1)


def classify(clf: Classifier, inputs: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and argmax class (lowest index on ties)."""
    with ad.no_grad():
        probs = probabilities(clf, inputs).data
    return probs, np.argmax(probs, axis=-1)


def _rows(probs: Tensor) -> np.ndarray:
    return np.arange(probs.shape[0])


def untargeted_margin(probs, reference_class: np.ndarray) -> Tensor:
    """max_{c != c_hat} F_c - F_{c_hat}; positive iff the prediction moved away from ``reference_class``."""
    probs = ad.as_tensor(probs)
    reference_class = np.asarray(reference_class, dtype=np.int64)
    rows = _rows(probs)
    masked = probs.data.copy()
    masked[rows, reference_class] = -np.inf
    runner_up = np.argmax(masked, axis=-1)
    return ad.getitem(probs, (rows, runner_up)) - ad.getitem(probs, (rows, reference_class))


def targeted_margin(probs, target_class: int) -> Tensor:
    """F_{c*} - max_{c != c*} F_c; positive iff the argmax is ``target_class``."""
    probs = ad.as_tensor(probs)
    if not 0 <= target_class < probs.shape[-1]:
        raise ShapeError(f"target class {target_class} outside 0..{probs.shape[-1] - 1}")
    rows = _rows(probs)
    targets = np.full(probs.shape[0], target_class)
    masked = probs.data.copy()
    masked[rows, targets] = -np.inf
    runner_up = np.argmax(masked, axis=-1)
    return ad.getitem(probs, (rows, targets)) - ad.getitem(probs, (rows, runner_up))


def loss_cls_untargeted(clf: Classifier, attacked_inputs: tuple, clean_inputs: tuple) -> np.ndarray:
    """Per-sample untargeted margins of ``attacked_inputs`` against the clean prediction."""
    _, clean_class = classify(clf, clean_inputs)
    with ad.no_grad():
        return untargeted_margin(probabilities(clf, attacked_inputs), clean_class).data


def loss_cls_targeted(clf: Classifier, attacked_inputs: tuple, target_class: int) -> np.ndarray:
    with ad.no_grad():
        return targeted_margin(probabilities(clf, attacked_inputs), target_class).data


@dataclass(frozen=True)
class AttackRecord:
    loss: float
    predicted: int
    target_class: int | None = None

    @property
    def success(self) -> bool:
        return self.loss > 0 if self.target_class is None else self.predicted == self.target_class


def attack_success_rate(records: Sequence[AttackRecord]) -> float:
    if not records:
        raise MetricError("attack success rate of an empty record set")
    return sum(record.success for record in records) / len(records)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class ClassifierTrainingResult:
    classifier: Classifier
    epoch_losses: list[float]
    val_accuracy: float
    duration_seconds: float = 0.0


def evaluate_accuracy(clf: Classifier, dataset: SyntheticDataset, batch_size: int = 32) -> float:
    predictions = []
    for indices in dataset.batches(batch_size):
        _, classes = classify(clf, task_inputs(dataset, indices))
        predictions.append(classes)
    return accuracy(np.concatenate(predictions), dataset.labels)


def train_classifier(
    clf: Classifier,
    dataset: SyntheticDataset,
    epochs: int = 10,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    val_fraction: float = 0.2,
) -> ClassifierTrainingResult:
    if len(dataset) == 0:
        raise DatasetError("cannot train a classifier on an empty dataset")
    start_time = datetime.now(pytz.UTC)
    train_set, val_set = dataset.split(val_fraction)
    rng = stream(seed, "classifier-train", clf.task, clf.role)
    optimizer = Adam(clf.network.named_parameters(), lr=lr)
    epoch_losses = []
    for epoch in range(epochs):
        losses = []
        for batch_index, indices in enumerate(train_set.batches(batch_size, rng)):
            loss = ad.cross_entropy(clf.logits(task_inputs(train_set, indices)), train_set.labels[indices])
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"{clf.task} classifier: loss became {loss.item()} at epoch {epoch + 1}, batch {batch_index + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        epoch_losses.append(float(np.mean(losses)))
        logger.info(f"{clf.task} ({clf.role}) epoch {epoch + 1}/{epochs}: loss {epoch_losses[-1]:.4f}")
    val_accuracy = evaluate_accuracy(clf, val_set)
    duration = (datetime.now(pytz.UTC) - start_time).total_seconds()
    logger.info(f"✓ {clf.task} ({clf.role}): val accuracy {val_accuracy:.3f} in {duration:.1f}s")
    return ClassifierTrainingResult(clf, epoch_losses, val_accuracy, duration)


# ---------------------------------------------------------------------------
# Task transmission
# ---------------------------------------------------------------------------


def _gop_slices(frames: int, gop_size: int) -> list[slice]:
    if frames % gop_size:
        raise ShapeError(f"{frames} frames do not split into GOPs of {gop_size}")
    return [slice(start, start + gop_size) for start in range(0, frames, gop_size)]


@dataclass
class TaskLinkOutput:
    inputs: tuple[Tensor, ...]
    rx_loss: Tensor
    mapped: list[Tensor]


def task_link_graph(
    task: str,
    codecs: dict[str, JsccCodec],
    inputs: tuple[np.ndarray, ...],
    rng: np.random.Generator,
    settings: ChannelSettings,
    cfg: OfdmConfig = OfdmConfig(),
    gop_size: int = 4,
    interference_for: Callable[[JsccCodec], Interference | None] | None = None,
) -> TaskLinkOutput:
    """Transmit a task batch through its codecs; VC clips go GOP by GOP through the video codec."""
    interference_for = interference_for or (lambda codec: None)
    if task == "vc":
        (clips,) = inputs
        codec = codecs["video"]
        pieces, mapped, rx_loss = [], [], None
        for gop in _gop_slices(clips.shape[1], gop_size):
            x = clips[:, gop]
            output = forward_link(codec, x, link_draws(rng, codec, x.shape[0], settings, cfg, gop_size), cfg, interference=interference_for(codec))
            loss = reconstruction_loss("video", x, output.reconstruction)
            rx_loss = loss if rx_loss is None else rx_loss + loss
            pieces.append(output.reconstruction)
            mapped.extend(output.mapped)
        return TaskLinkOutput((ad.concat(pieces, axis=1),), rx_loss, mapped)

    image, audio = inputs
    outputs = []
    for modality, x in (("image", image), ("speech", audio)):
        codec = codecs[modality]
        draws = link_draws(rng, codec, x.shape[0], settings, cfg)
        outputs.append((modality, x, forward_link(codec, x, draws, cfg, interference=interference_for(codec))))
    rx_loss = reconstruction_loss("image", image, outputs[0][2].reconstruction) + reconstruction_loss("speech", audio, outputs[1][2].reconstruction)
    return TaskLinkOutput(
        (outputs[0][2].reconstruction, outputs[1][2].reconstruction),
        rx_loss,
        outputs[0][2].mapped + outputs[1][2].mapped,
    )


def task_draws(
    task: str,
    codecs: dict[str, JsccCodec],
    batch: int,
    frames: int,
    rng: np.random.Generator,
    settings: ChannelSettings,
    cfg: OfdmConfig = OfdmConfig(),
    gop_size: int = 4,
) -> dict[str, list[LinkDraw]]:
    """Channel draws for one numpy task transmission, keyed by modality (VC GOPs concatenated)."""
    if task == "vc":
        codec = codecs["video"]
        return {"video": [draw for _ in _gop_slices(frames, gop_size) for draw in link_draws(rng, codec, batch, settings, cfg, gop_size)]}
    return {modality: link_draws(rng, codecs[modality], batch, settings, cfg) for modality in TASK_CODECS[task]}


def task_link_numpy(
    task: str,
    codecs: dict[str, JsccCodec],
    inputs: tuple[np.ndarray, ...],
    draws: dict[str, list[LinkDraw]],
    cfg: OfdmConfig = OfdmConfig(),
    gop_size: int = 4,
    channel_for: Callable[[JsccCodec], Callable | None] | None = None,
) -> tuple[np.ndarray, ...]:
    """numpy counterpart of ``task_link_graph``; returns the reconstructed classifier inputs."""
    channel_for = channel_for or (lambda codec: None)
    if task == "vc":
        (clips,) = inputs
        codec = codecs["video"]
        pieces = []
        for index, gop in enumerate(_gop_slices(clips.shape[1], gop_size)):
            gop_draws = draws["video"][index * gop_size : (index + 1) * gop_size]
            pieces.append(run_link(codec, clips[:, gop], gop_draws, cfg, channel=channel_for(codec)))
        return (np.concatenate(pieces, axis=1),)
    image, audio = inputs
    return (
        run_link(codecs["image"], image, draws["image"], cfg, channel=channel_for(codecs["image"])),
        run_link(codecs["speech"], audio, draws["speech"], cfg, channel=channel_for(codecs["speech"])),
    )
