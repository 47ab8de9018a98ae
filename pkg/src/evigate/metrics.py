"""Evaluation: weighted F1, calibration error, reliability bins and
uncertainty-based confident/uncertain stratification.

Confidence is always the max fused probability of the evaluated method, so
softmax, evidential and fused predictors are compared on the same footing.
Bins are equal-width and right-closed on (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError

DEFAULT_BINS = 10
DEFAULT_GRID = tuple(np.round(np.linspace(0.1, 1.0, 10), 10))
DEFAULT_MIN_RETENTION = 0.5


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    accuracy: float
    mean_confidence: float


@dataclass
class StratificationRow:
    """Confident/uncertain split of one method's predictions."""

    method: str
    split: str
    thresholds: np.ndarray        # (C,) per predicted class
    confident_count: int
    confident_f1: float           # NaN when the subset is empty
    uncertain_count: int
    uncertain_f1: float           # NaN when the subset is empty
    retention: float


def weighted_f1(preds, labels) -> float:
    """Support-weighted mean of per-class F1 scores.

    Classes absent from ``labels`` carry zero weight; a class with zero
    precision+recall contributes F1 = 0.
    """
    preds = np.asarray(preds, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if preds.size == 0 or preds.shape != labels.shape:
        raise EmptyInputError("weighted_f1 needs equal-length nonempty inputs")
    total = 0.0
    for cls in np.unique(labels):
        support = int((labels == cls).sum())
        tp = int(((preds == cls) & (labels == cls)).sum())
        fp = int(((preds == cls) & (labels != cls)).sum())
        fn = int(((preds != cls) & (labels == cls)).sum())
        denom = 2 * tp + fp + fn
        f1 = (2.0 * tp / denom) if denom else 0.0
        total += support * f1
    return total / labels.size


def _bin_index(confidences: np.ndarray, n_bins: int) -> np.ndarray:
    # Right-closed bins ((m-1)/M, m/M]; conf <= 0 falls into the first bin.
    edges = np.arange(1, n_bins + 1) / n_bins
    idx = np.searchsorted(edges, confidences, side="left")
    return np.clip(idx, 0, n_bins - 1)


def reliability_diagram(confidences, correct, n_bins: int = DEFAULT_BINS
                        ) -> list[ReliabilityBin]:
    """Per-bin counts, empirical accuracy and mean confidence."""
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.size == 0 or conf.shape != corr.shape:
        raise EmptyInputError("reliability_diagram needs equal-length nonempty inputs")
    if n_bins < 1:
        raise EmptyInputError("n_bins must be >= 1")
    idx = _bin_index(conf, n_bins)
    bins = []
    for m in range(n_bins):
        mask = idx == m
        count = int(mask.sum())
        bins.append(ReliabilityBin(
            lower=m / n_bins,
            upper=(m + 1) / n_bins,
            count=count,
            accuracy=float(corr[mask].mean()) if count else 0.0,
            mean_confidence=float(conf[mask].mean()) if count else 0.0,
        ))
    return bins


def ece_from_bins(bins: list[ReliabilityBin]) -> float:
    total = sum(b.count for b in bins)
    return sum(b.count / total * abs(b.accuracy - b.mean_confidence)
               for b in bins if b.count)


def ece(confidences, correct, n_bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error: bin-weighted |accuracy - confidence|."""
    return ece_from_bins(reliability_diagram(confidences, correct, n_bins))


def fit_thresholds(preds, uncertainties, labels,
                   grid=DEFAULT_GRID,
                   min_retention: float = DEFAULT_MIN_RETENTION) -> np.ndarray:
    """Per-predicted-class uncertainty thresholds fitted on validation data.

    For each predicted class c the candidate thresholds are the ``grid``
    quantiles of the class-c uncertainties; the winner maximises weighted F1
    on the retained (u <= t) class-c subset among candidates keeping at
    least ``min_retention`` of the class-c samples, ties broken toward
    higher retention.  Classes never predicted fall back to a threshold
    fitted the same way on the full set.
    """
    preds = np.asarray(preds, dtype=np.intp)
    unc = np.asarray(uncertainties, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if preds.size == 0:
        raise EmptyInputError("fit_thresholds needs nonempty predictions")
    grid = np.asarray(sorted(grid), dtype=np.float64)
    n_classes = int(max(preds.max(), labels.max())) + 1

    def best_threshold(mask: np.ndarray) -> float:
        u = unc[mask]
        candidates = np.quantile(u, grid)
        best_t, best_f1, best_kept = float(u.max()), -1.0, -1
        for t in candidates:
            keep = u <= t
            kept = int(keep.sum())
            if kept < min_retention * u.size or kept == 0:
                continue
            f1 = weighted_f1(preds[mask][keep], labels[mask][keep])
            if f1 > best_f1 or (f1 == best_f1 and kept > best_kept):
                best_t, best_f1, best_kept = float(t), f1, kept
        return best_t

    fallback = best_threshold(np.ones_like(preds, dtype=bool))
    thresholds = np.full(n_classes, fallback)
    for cls in range(n_classes):
        mask = preds == cls
        if mask.any():
            thresholds[cls] = best_threshold(mask)
    return thresholds


def stratify(preds, uncertainties, labels, thresholds, method: str = "",
             split: str = "") -> StratificationRow:
    """Partition predictions into confident (u <= t_pred) and uncertain."""
    preds = np.asarray(preds, dtype=np.intp)
    unc = np.asarray(uncertainties, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    confident = unc <= thresholds[preds]
    n_conf = int(confident.sum())
    n_unc = int(preds.size - n_conf)
    conf_f1 = weighted_f1(preds[confident], labels[confident]) if n_conf else float("nan")
    unc_f1 = weighted_f1(preds[~confident], labels[~confident]) if n_unc else float("nan")
    return StratificationRow(
        method=method,
        split=split,
        thresholds=thresholds,
        confident_count=n_conf,
        confident_f1=conf_f1,
        uncertain_count=n_unc,
        uncertain_f1=unc_f1,
        retention=n_conf / preds.size,
    )
