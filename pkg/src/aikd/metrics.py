"""Evaluation and calibration metrics: top-k error, macro F1, ECE, temperature scaling.

Works on plain numpy logits so it stays independent of the training stack;
``evaluate`` is the bridge that runs a frozen torch model over a split and
funnels the collected logits through here. Rescaling logits by a fitted
temperature changes confidences but never the argmax, which is why the
calibration step can shrink ECE without touching the error rates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax

__all__ = [
    "PredictionSet",
    "MetricsReport",
    "ReliabilityBins",
    "topk_error",
    "macro_f1",
    "ece",
    "ece_from_confidences",
    "temperature_scale",
    "evaluate",
    "collect_predictions",
    "write_reliability_csv",
]


@dataclass(frozen=True)
class PredictionSet:
    """Raw logits and true labels for one evaluation split."""

    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        if logits.ndim != 2 or logits.shape[1] < 2:
            raise ValueError("logits must be (n, classes) with classes >= 2")
        if labels.shape != (logits.shape[0],):
            raise ValueError("labels must match the logits batch dimension")
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise ValueError("label outside class range")
        if not np.isfinite(logits).all():
            raise ValueError("logits contain NaN or Inf")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ReliabilityBins:
    """Equal-width confidence bins over (0, 1]; counts always sum to n_samples."""

    lower: np.ndarray
    upper: np.ndarray
    count: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.count)


@dataclass
class MetricsReport:
    top1_error: float  # percent
    top5_error: float  # percent
    macro_f1: float
    ece: float  # percent
    n_samples: int
    n_bins: int
    ece_after_ts: Optional[float] = None
    calibration_temperature: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.top5_error <= self.top1_error <= 100.0):
            raise ValueError("need 0 <= top5_error <= top1_error <= 100")
        if not (0.0 <= self.ece <= 100.0 and 0.0 <= self.macro_f1 <= 1.0):
            raise ValueError("ece must be a percent and macro_f1 a fraction")

    def to_json_dict(self) -> dict:
        return asdict(self)


def _ranked_classes(logits: np.ndarray) -> np.ndarray:
    # Stable sort on the negated logits: ties rank the lower class index first.
    return np.argsort(-logits, axis=1, kind="stable")


def topk_error(preds: PredictionSet, k: int) -> float:
    """Percent of samples whose label is outside the k top-ranked classes."""
    if not 1 <= k < preds.num_classes:
        raise ValueError(f"k must lie in [1, {preds.num_classes - 1}], got {k}")
    topk = _ranked_classes(preds.logits)[:, :k]
    hit = (topk == preds.labels[:, None]).any(axis=1)
    return 100.0 * float((~hit).mean())


def macro_f1(preds: PredictionSet) -> float:
    """Unweighted mean of per-class F1 over all classes; degenerate classes score 0."""
    predicted = _ranked_classes(preds.logits)[:, 0]
    scores = []
    for cls in range(preds.num_classes):
        tp = int(np.sum((predicted == cls) & (preds.labels == cls)))
        fp = int(np.sum((predicted == cls) & (preds.labels != cls)))
        fn = int(np.sum((predicted != cls) & (preds.labels == cls)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(scores))


def _bin_index(confidences: np.ndarray, n_bins: int) -> np.ndarray:
    # Bins partition (0, 1]; a confidence exactly on a boundary falls in the lower bin.
    idx = np.ceil(confidences * n_bins).astype(int) - 1
    return np.clip(idx, 0, n_bins - 1)


def ece(preds: PredictionSet, n_bins: int = 15) -> tuple[float, ReliabilityBins]:
    """Expected calibration error (percent) plus the underlying reliability bins."""
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    probs = softmax(preds.logits, axis=1)
    confidences = probs.max(axis=1)
    correct = probs.argmax(axis=1) == preds.labels
    return ece_from_confidences(confidences, correct, n_bins)


def ece_from_confidences(
    confidences: np.ndarray, correct: np.ndarray, n_bins: int
) -> tuple[float, ReliabilityBins]:
    """ECE straight from per-sample confidences and correctness flags."""
    idx = _bin_index(confidences, n_bins)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=confidences, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct.astype(float), minlength=n_bins)
    occupied = count > 0
    mean_conf = np.where(occupied, conf_sum / np.maximum(count, 1), 0.0)
    accuracy = np.where(occupied, acc_sum / np.maximum(count, 1), 0.0)
    weights = count / max(len(confidences), 1)
    value = 100.0 * float(np.sum(weights * np.abs(accuracy - mean_conf)))
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = ReliabilityBins(
        lower=edges[:-1],
        upper=edges[1:],
        count=count,
        mean_confidence=mean_conf,
        accuracy=accuracy,
    )
    return value, bins


def _mean_nll(logits: np.ndarray, labels: np.ndarray, tau: float) -> float:
    scaled = logits / tau
    log_probs = scaled - logsumexp(scaled, axis=1, keepdims=True)
    return -float(log_probs[np.arange(len(labels)), labels].mean())


def temperature_scale(
    val_preds: PredictionSet, log_lo: float = math.log(0.05), log_hi: float = math.log(20.0)
) -> float:
    """Temperature minimizing validation NLL, by golden-section search on log-temperature.

    The NLL is unimodal in the temperature for practical logits; a
    derivative-free search to 1e-4 on the log scale is plenty. Dividing by the
    result rescales confidences without moving any argmax.
    """
    if len(np.unique(val_preds.labels)) < 2:
        raise ValueError("temperature scaling needs at least two label classes")

    def objective(log_tau: float) -> float:
        return _mean_nll(val_preds.logits, val_preds.labels, math.exp(log_tau))

    return math.exp(_golden_section(objective, log_lo, log_hi, tol=1e-4))


def _golden_section(fn, lo: float, hi: float, tol: float) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def collect_predictions(model, source, batch_size: int = 256, crop: Optional[int] = None) -> PredictionSet:
    """Run a frozen classifier over a sample source and gather its logits.

    ``crop`` center-crops to the model's input size when the stored
    resolution is larger (fine-grained datasets).
    """
    import torch

    from .augment import center_crop
    from .data import batch_tensors

    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(source), batch_size):
            images, _ = batch_tensors(source, np.arange(start, min(start + batch_size, len(source))))
            chunks.append(model(center_crop(images, crop)).double().numpy())
    return PredictionSet(np.concatenate(chunks), source.labels)


def evaluate(
    model, source, n_bins: int = 15, calibrate: bool = False, crop: Optional[int] = None
) -> tuple[MetricsReport, ReliabilityBins]:
    """Single-pass evaluation of a frozen model on a split.

    With ``calibrate`` set, a temperature is fitted on this split and the ECE
    is recomputed after scaling; raw ECE stays in the report alongside it.
    """
    if len(source) == 0:
        raise ValueError("empty evaluation split")
    preds = collect_predictions(model, source, crop=crop)
    return evaluate_predictions(preds, n_bins=n_bins, calibrate=calibrate)


def evaluate_predictions(
    preds: PredictionSet, n_bins: int = 15, calibrate: bool = False
) -> tuple[MetricsReport, ReliabilityBins]:
    top5_k = min(5, preds.num_classes - 1)
    raw_ece, bins = ece(preds, n_bins)
    report = MetricsReport(
        top1_error=topk_error(preds, 1),
        top5_error=topk_error(preds, top5_k),
        macro_f1=macro_f1(preds),
        ece=raw_ece,
        n_samples=len(preds),
        n_bins=n_bins,
    )
    if calibrate:
        tau = temperature_scale(preds)
        scaled = PredictionSet(preds.logits / tau, preds.labels)
        report.ece_after_ts = ece(scaled, n_bins)[0]
        report.calibration_temperature = tau
    return report, bins


def write_reliability_csv(path: Path, bins: ReliabilityBins) -> None:
    """One row per bin with exactly the columns downstream tooling expects."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lower", "bin_upper", "count", "mean_confidence", "accuracy"])
        for i in range(bins.n_bins):
            writer.writerow(
                [
                    f"{bins.lower[i]:.9g}",
                    f"{bins.upper[i]:.9g}",
                    int(bins.count[i]),
                    f"{bins.mean_confidence[i]:.9g}",
                    f"{bins.accuracy[i]:.9g}",
                ]
            )
