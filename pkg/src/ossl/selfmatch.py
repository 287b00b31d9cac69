"""Test-set partitioning and the self-matching objective.

Each adaptation epoch splits the unlabeled test set by the classifier's own
output rows: confident rows become pseudo-labeled knowns, near-flat rows
become pseudo-unknowns, and the rest stay uncertain.  The objective then
plays a min-max game over that split: the classifier fits the pseudo-labels
(plus a few injected labeled source rows), the detector separates pseudo-
known from pseudo-unknown, and the matcher tries to tell pseudo-known from
uncertain while the extractor -- through a gradient-reversal node -- tries
to make them indistinguishable.  A margin penalty pushes every class logit
of pseudo-unknown rows below a fixed negative bound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import NumericsError, ShapeError, ValidationError
from .model import Linear, ModelBundle
from .tensor import Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# partition


@dataclass
class Partition:
    """Index split of one batch (or the whole test set) into three subsets."""

    known_idx: np.ndarray       # confident rows, pseudo-labeled by argmax
    pseudo_labels: np.ndarray   # one label in 1..K per known row
    uncertain_idx: np.ndarray
    unknown_idx: np.ndarray

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.known_idx.size, self.uncertain_idx.size, self.unknown_idx.size


def partition_test_set(rows: np.ndarray, confidence_threshold: float,
                       flatness_gap: float,
                       rows_are_probabilities: bool = True) -> Partition:
    """Split rows of classifier output into known / uncertain / unknown sets.

    A row is *known* when its max entry exceeds ``confidence_threshold`` and
    *unknown* when its max-min spread is below ``flatness_gap``.  A row can
    satisfy both predicates; confidence wins.  Everything else is uncertain.
    Thresholds apply to whatever domain the rows are in; softmax rows are the
    default, raw logits are allowed when ``rows_are_probabilities`` is False.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise ShapeError(f"partition needs an n x K matrix with K >= 2, got {rows.shape}")
    if not np.isfinite(rows).all():
        raise ValidationError("partition input contains non-finite values")
    if rows_are_probabilities:
        if rows.size and (rows.min() < -1e-9 or
                          np.abs(rows.sum(axis=1) - 1.0).max() > 1e-6):
            raise ValidationError("rows are not probability distributions; "
                                  "pass rows_are_probabilities=False for raw logits")
        if not 0.0 < confidence_threshold < 1.0:
            raise ValidationError("confidence_threshold must be in (0, 1) for probabilities")
    if flatness_gap <= 0.0:
        raise ValidationError(f"flatness_gap must be positive, got {flatness_gap}")

    top = rows.max(axis=1)
    spread = top - rows.min(axis=1)
    confident = top > confidence_threshold
    flat = (spread < flatness_gap) & ~confident
    rest = ~confident & ~flat

    known_idx = np.flatnonzero(confident)
    return Partition(
        known_idx=known_idx,
        pseudo_labels=rows[known_idx].argmax(axis=1) + 1 if known_idx.size
        else np.empty(0, dtype=np.int64),
        uncertain_idx=np.flatnonzero(rest),
        unknown_idx=np.flatnonzero(flat),
    )


# ---------------------------------------------------------------------------
# sample-level weights


@dataclass
class SampleWeights:
    """Per-sample weights for the matching loss; detached constants."""

    source_side: np.ndarray
    target_side: np.ndarray


def compute_weights(probs: np.ndarray, detector_score: np.ndarray,
                    swap_signs: bool = False) -> SampleWeights:
    """Weights from normalized prediction entropy versus the detector score.

    For each row, let h = entropy(probs)/log(K) in [0, 1] and d the detector
    output in (0, 1).  The source-side weight is clamp(h - d, 0, 1) and the
    target-side weight clamp(d - h, 0, 1); ``swap_signs`` mirrors the pair.
    Both are plain arrays: no gradient flows through them.
    """
    probs = np.asarray(probs, dtype=np.float64)
    d = np.asarray(detector_score, dtype=np.float64).reshape(-1)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ShapeError(f"weights need an n x K probability matrix, got {probs.shape}")
    if d.shape != (probs.shape[0],):
        raise ShapeError("detector score length does not match probability rows")
    h = T.row_entropy(probs) / np.log(probs.shape[1])
    source = np.clip(h - d, 0.0, 1.0)
    target = np.clip(d - h, 0.0, 1.0)
    if swap_signs:
        source, target = target, source
    return SampleWeights(source_side=source, target_side=target)


# ---------------------------------------------------------------------------
# losses


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise ValidationError("classifier targets must lie in 1..K")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels - 1] = 1.0
    return out


def classifier_loss(pseudo_logits: Tensor | None, pseudo_labels: np.ndarray,
                    injected_logits: Tensor | None, injected_labels: np.ndarray,
                    k: int) -> Tensor:
    """Mean cross-entropy on pseudo-labeled rows plus mean on injected rows.

    The two means are added, not pooled, so the small injected batch is not
    drowned out by the pseudo-labeled one.  An empty side contributes 0.
    """
    total = T.constant(0.0)
    if pseudo_logits is not None and pseudo_logits.values.shape[0]:
        total = T.add(total, T.cross_entropy(pseudo_logits, _one_hot(pseudo_labels, k)))
    if injected_logits is not None and injected_logits.values.shape[0]:
        total = T.add(total, T.cross_entropy(injected_logits, _one_hot(injected_labels, k)))
    return total


def detection_loss(positive_scores: Tensor | None, negative_scores: Tensor | None) -> Tensor:
    """BCE pushing pseudo-known (and injected) rows to 1, pseudo-unknown to 0.

    Each side is its own expectation; an empty side contributes 0.
    """
    total = T.constant(0.0)
    if positive_scores is not None and positive_scores.values.shape[0]:
        total = T.add(total, T.binary_cross_entropy(
            positive_scores, np.ones_like(positive_scores.values)))
    if negative_scores is not None and negative_scores.values.shape[0]:
        total = T.add(total, T.binary_cross_entropy(
            negative_scores, np.zeros_like(negative_scores.values)))
    return total


def adversarial_loss(source_scores: Tensor | None, source_weights: np.ndarray,
                     target_scores: Tensor | None, target_weights: np.ndarray) -> Tensor:
    """Weighted BCE for the domain-matching game.

    Source-side rows carry target 1, uncertain rows target 0; each side is a
    weighted expectation (1/|S|) sum w_i * term_i, so a zero weight silences
    a sample completely.  The matcher descends on this; the extractor ascends
    because its input passed through a gradient-reversal node.
    """
    total = T.constant(0.0)
    if source_scores is not None and source_scores.values.shape[0]:
        w = np.asarray(source_weights, dtype=np.float64).reshape(-1, 1)
        if w.shape[0] != source_scores.values.shape[0]:
            raise ShapeError("source weights do not match source scores")
        p = T.clip(source_scores, T.LOG_EPS, 1.0 - T.LOG_EPS)
        total = T.add(total, T.tmean(T.mul(w, T.neg(T.log(p)))))
    if target_scores is not None and target_scores.values.shape[0]:
        w = np.asarray(target_weights, dtype=np.float64).reshape(-1, 1)
        if w.shape[0] != target_scores.values.shape[0]:
            raise ShapeError("target weights do not match target scores")
        p = T.clip(target_scores, T.LOG_EPS, 1.0 - T.LOG_EPS)
        total = T.add(total, T.tmean(T.mul(w, T.neg(T.log(T.sub(1.0, p))))))
    return total


def margin_loss(unknown_logits: Tensor | None, margin: float) -> Tensor:
    """Hinge pushing every class logit of pseudo-unknown rows below -margin.

    (1/N) * sum over rows and classes of max(0, margin + logit); zero exactly
    when every logit is at or below -margin.  Empty input contributes 0.
    """
    if margin < 0:
        raise ValidationError(f"margin must be >= 0, got {margin}")
    if unknown_logits is None or not unknown_logits.values.shape[0]:
        return T.constant(0.0)
    return T.tmean(T.tsum(T.relu(T.add(unknown_logits, margin)), axis=1))


# ---------------------------------------------------------------------------
# assembled objective


@dataclass
class LossBreakdown:
    """Component values of one assembled objective, for logging and traces."""

    classifier: float
    adversarial: float
    detector: float
    margin: float
    total: float
    n_known: int
    n_uncertain: int
    n_unknown: int
    n_injected: int

    def as_dict(self) -> dict:
        return {
            "loss_classifier": self.classifier,
            "loss_adversarial": self.adversarial,
            "loss_detector": self.detector,
            "loss_margin": self.margin,
            "loss_total": self.total,
            "n_known": self.n_known,
            "n_uncertain": self.n_uncertain,
            "n_unknown": self.n_unknown,
            "n_injected": self.n_injected,
        }


def assemble_objective(bundle: ModelBundle, batch: np.ndarray, part: Partition,
                       injected: Dataset | None, k: int, margin: float = 2.0,
                       enable_margin: bool = True, reversal_coefficient: float = 1.0,
                       swap_weight_signs: bool = False) -> tuple[Tensor, LossBreakdown]:
    """Build the full self-matching objective for one batch as a single scalar.

    The batch and the injected rows share one extractor forward pass.  The
    returned scalar is what a plain descent step minimizes; the reversal node
    inside the matching path makes that step simultaneously a descent for the
    matcher and an ascent for the extractor on the matching term.  The margin
    term reaches the extractor only: it re-applies the classifier weights as
    detached constants.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {batch.shape}")
    n_batch = batch.shape[0]
    n_injected = injected.n if injected is not None else 0
    if n_injected:
        if injected.features.shape[1] != batch.shape[1]:
            raise ShapeError("injected rows have a different feature dimension")
        x = np.vstack([batch, injected.features])
    else:
        x = batch

    feats = bundle.extractor(T.constant(x))
    logits = bundle.classifier(feats)
    detect = bundle.detector(feats)
    match = bundle.matcher(T.reverse_gradient(feats, reversal_coefficient))

    injected_rows = n_batch + np.arange(n_injected)
    positive_rows = np.concatenate([part.known_idx, injected_rows]).astype(np.intp)

    # Weights come from the current forward values and stay constants.
    probs = T.np_softmax(logits.values)
    weights = compute_weights(probs, detect.values[:, 0], swap_signs=swap_weight_signs)

    loss_cls = classifier_loss(
        T.gather_rows(logits, part.known_idx) if part.known_idx.size else None,
        part.pseudo_labels,
        T.gather_rows(logits, injected_rows) if n_injected else None,
        injected.labels if n_injected else np.empty(0, dtype=np.int64),
        k,
    )
    if part.known_idx.size == 0 and n_injected == 0:
        logger.warning("classifier loss skipped: no confident rows and no injected rows")

    loss_det = detection_loss(
        T.gather_rows(detect, positive_rows) if positive_rows.size else None,
        T.gather_rows(detect, part.unknown_idx) if part.unknown_idx.size else None,
    )

    loss_adv = adversarial_loss(
        T.gather_rows(match, positive_rows) if positive_rows.size else None,
        weights.source_side[positive_rows],
        T.gather_rows(match, part.uncertain_idx) if part.uncertain_idx.size else None,
        weights.target_side[part.uncertain_idx],
    )

    if enable_margin and part.unknown_idx.size:
        frozen = Linear.__new__(Linear)
        frozen.weight = T.constant(bundle.classifier.weight.values.copy())
        frozen.bias = T.constant(bundle.classifier.bias.values.copy())
        unknown_logits = frozen(T.gather_rows(feats, part.unknown_idx))
        loss_mar = margin_loss(unknown_logits, margin)
    else:
        loss_mar = T.constant(0.0)

    total = T.add(T.add(loss_cls, loss_adv), T.add(loss_det, loss_mar))
    breakdown = LossBreakdown(
        classifier=float(loss_cls.values), adversarial=float(loss_adv.values),
        detector=float(loss_det.values), margin=float(loss_mar.values),
        total=float(total.values),
        n_known=int(part.known_idx.size), n_uncertain=int(part.uncertain_idx.size),
        n_unknown=int(part.unknown_idx.size), n_injected=int(n_injected),
    )
    for name, value in (("classifier", breakdown.classifier),
                        ("adversarial", breakdown.adversarial),
                        ("detector", breakdown.detector),
                        ("margin", breakdown.margin)):
        if not np.isfinite(value):
            raise NumericsError(f"{name} loss is not finite")
    return total, breakdown
