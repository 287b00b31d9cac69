"""Open-set evaluation: unknown-detection AUROC, macro-F1 with rejection,
and closed-set accuracy.

AUROC is computed by rank-sum: sort once, average ranks inside tie groups,
and read off the probability that a random known sample outscores a random
unknown one with ties worth half.  Macro-F1 scores K+1 classes where class
0 is the unknown sentinel; a sample is predicted unknown when its known-ness
score falls below the rejection threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import UNKNOWN
from .errors import (NumericsError, ShapeError, UndefinedMetricError,
                     ValidationError)
from .tensor import np_softmax

logger = logging.getLogger(__name__)

SCORE_KINDS = ("max-logit", "max-softmax", "detector")


@dataclass
class ScoredPredictions:
    """Per-sample known-ness score, closed-set prediction, and truth."""

    scores: np.ndarray       # higher = more known
    predicted: np.ndarray    # argmax class in 1..K
    truth: np.ndarray        # 0 (unknown) or 1..K
    k: int
    score_kind: str = "max-logit"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        self.truth = np.asarray(self.truth, dtype=np.int64)
        n = self.scores.shape[0]
        if self.scores.ndim != 1 or self.predicted.shape != (n,) or self.truth.shape != (n,):
            raise ShapeError("scores, predicted and truth must be equal-length vectors")
        # non-finite scores mean the model blew up, not that the call was wrong
        if not np.isfinite(self.scores).all():
            raise NumericsError("scores must be finite")
        if self.score_kind not in SCORE_KINDS:
            raise ValidationError(f"score_kind must be one of {SCORE_KINDS}")
        if n and (self.predicted.min() < 1 or self.predicted.max() > self.k):
            raise ValidationError("predicted classes must lie in 1..K")
        if n and (self.truth.min() < 0 or self.truth.max() > self.k):
            raise ValidationError("truth labels must lie in 0..K")


def score_rows(logits: np.ndarray, detector_score: np.ndarray | None = None,
               kind: str = "max-logit") -> np.ndarray:
    """Known-ness score per row under the chosen convention."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {logits.shape}")
    if kind == "max-logit":
        return logits.max(axis=1)
    if kind == "max-softmax":
        return np_softmax(logits).max(axis=1)
    if kind == "detector":
        if detector_score is None:
            raise ValidationError("detector score requested but none provided")
        return np.asarray(detector_score, dtype=np.float64).reshape(-1)
    raise ValidationError(f"score_kind must be one of {SCORE_KINDS}")


def auroc(scores: np.ndarray, is_known: np.ndarray) -> float:
    """Probability a random known sample outscores a random unknown one.

    Rank-sum form of the Mann-Whitney statistic: one sort, average ranks
    over tie groups, ties count half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_known = np.asarray(is_known, dtype=bool)
    if scores.ndim != 1 or scores.shape != is_known.shape:
        raise ShapeError("scores and is_known must be equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValidationError("scores must be finite")
    n_pos = int(is_known.sum())
    n_neg = is_known.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one known and one unknown sample")

    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[is_known].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def apply_rejection(pred: ScoredPredictions, threshold: float) -> np.ndarray:
    """Final open-set prediction: below-threshold rows become UNKNOWN."""
    out = pred.predicted.copy()
    out[pred.scores < threshold] = UNKNOWN
    return out


def macro_f1(pred: ScoredPredictions, threshold: float) -> float:
    """Unweighted mean F1 over the K+1 classes after rejection.

    A class absent from both truth and predictions contributes F1 = 0 and
    is logged, so a missing class is visible rather than silently inflating
    the mean.
    """
    if pred.scores.size == 0:
        raise ValidationError("macro_f1 needs at least one sample")
    final = apply_rejection(pred, threshold)
    f1s = []
    for cls in range(pred.k + 1):
        tp = int(np.sum((final == cls) & (pred.truth == cls)))
        fp = int(np.sum((final == cls) & (pred.truth != cls)))
        fn = int(np.sum((final != cls) & (pred.truth == cls)))
        if tp == 0 and fp == 0 and fn == 0:
            logger.warning("class %d absent from truth and predictions; F1 set to 0", cls)
            f1s.append(0.0)
            continue
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn) if tp else 0.0)
    return float(np.mean(f1s))


def closed_set_accuracy(pred: ScoredPredictions) -> float:
    """Argmax accuracy restricted to rows whose truth is a known class."""
    known = pred.truth != UNKNOWN
    if not known.any():
        raise UndefinedMetricError("accuracy needs at least one known-truth sample")
    return float(np.mean(pred.predicted[known] == pred.truth[known]))


def calibrate_threshold(validation_scores: np.ndarray, retention: float = 0.95) -> float:
    """Score cutoff that keeps the target fraction of known validation rows.

    Retention 1.0 returns just below the minimum so nothing is rejected.
    """
    scores = np.asarray(validation_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("threshold calibration needs a nonempty validation set")
    if not np.isfinite(scores).all():
        raise NumericsError("validation scores must be finite")
    if not 0.0 < retention <= 1.0:
        raise ValidationError(f"retention must be in (0, 1], got {retention}")
    if retention == 1.0:
        lo = float(scores.min())
        return lo - 1e-9 * max(1.0, abs(lo))
    return float(np.quantile(scores, 1.0 - retention))


def evaluate_predictions(pred: ScoredPredictions, threshold: float) -> dict:
    """The three headline metrics plus the threshold that produced them."""
    return {
        "auroc": auroc(pred.scores, pred.truth != UNKNOWN),
        "macro_f1": macro_f1(pred, threshold),
        "acc": closed_set_accuracy(pred),
        "threshold": float(threshold),
        "score_kind": pred.score_kind,
    }
