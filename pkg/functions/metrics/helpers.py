"""Reconstruction and detection metrics: PSNR, MSE, BLEU, accuracy, ROC-AUC."""

from collections import Counter
from collections.abc import Sequence
from dataclasses import asdict, dataclass
import math

import numpy as np
from scipy.stats import rankdata

from shared.errors import MetricError


PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class MetricReport:
    metric: str
    value: float
    trials: int
    psr_db: float | None = None
    modality: str = ""
    scenario: str = ""

    def __post_init__(self):
        if self.trials < 1:
            raise MetricError(f"metric report needs at least one trial, got {self.trials}")
        if not math.isfinite(self.value) and not (self.metric == "psnr" and self.value == PSNR_CAP_DB):
            raise MetricError(f"metric '{self.metric}' has non-finite value {self.value}")

    def as_row(self) -> dict:
        return asdict(self)


def _check_same_shape(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def mse_metric(x: np.ndarray, x_hat: np.ndarray) -> float:
    x, x_hat = _check_same_shape(x, x_hat)
    return float(np.mean((x - x_hat) ** 2))


def psnr(x: np.ndarray, x_hat: np.ndarray, max_value: float = 1.0) -> float:
    """10 log10(max^2 / MSE); a perfect reconstruction reports the 99 dB cap."""
    error = mse_metric(x, x_hat)
    if error == 0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(max_value**2 / error)


def accuracy(predictions: Sequence[int] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise MetricError(f"{predictions.shape[0] if predictions.ndim else 0} predictions for {labels.shape[0] if labels.ndim else 0} labels")
    if predictions.size == 0:
        raise MetricError("accuracy of an empty set")
    return float(np.mean(predictions == labels))


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence, reference: Sequence, max_order: int = 4) -> float:
    """
    Sentence BLEU without smoothing: geometric mean of clipped n-gram precisions for
    n = 1..min(4, len(candidate)) times the brevity penalty. Any zero precision gives 0.
    """
    if len(candidate) == 0 or len(reference) == 0:
        raise MetricError("BLEU needs non-empty candidate and reference")
    candidate, reference = list(candidate), list(reference)
    orders = min(max_order, len(candidate))
    log_precision = 0.0
    for n in range(1, orders + 1):
        cand_counts = _ngrams(candidate, n)
        ref_counts = _ngrams(reference, n)
        matches = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        if matches == 0:
            return 0.0
        log_precision += math.log(matches / sum(cand_counts.values()))
    brevity = 1.0 if len(candidate) > len(reference) else math.exp(1.0 - len(reference) / len(candidate))
    return brevity * math.exp(log_precision / orders)


def auc_roc(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting one half."""
    positive = np.asarray(positive_scores, dtype=np.float64)
    negative = np.asarray(negative_scores, dtype=np.float64)
    if positive.size == 0 or negative.size == 0:
        raise MetricError("AUC needs both positive and negative scores")
    ranks = rankdata(np.concatenate([positive, negative]))
    rank_sum = ranks[: positive.size].sum()
    return float((rank_sum - positive.size * (positive.size + 1) / 2.0) / (positive.size * negative.size))
