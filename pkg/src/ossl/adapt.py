"""The adaptation loop: re-partition, inject, assemble, update, until done.

Each epoch freezes the classifier's view of the whole test set, partitions
it once, then walks shuffled batches applying the frozen membership while
the parameters move.  One SGD step per batch updates every trainable group
from the single assembled objective.  The loop stops at the epoch cap or
when the epoch-mean total loss stops moving.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Dataset, sample_injection_batch
from .errors import NumericsError, TrainingError, ValidationError
from .metrics import (SCORE_KINDS, ScoredPredictions, calibrate_threshold,
                      evaluate_predictions, score_rows)
from .model import (DenseNet, Linear, ModelBundle, ScalarHead, StartingPoint,
                    parameter_checksums)
from .selfmatch import LossBreakdown, Partition, assemble_objective, partition_test_set


@dataclass(frozen=True)
class EvalOptions:
    """How known-ness is scored and how the rejection cutoff is calibrated."""

    score_kind: str = "max-logit"
    retention: float = 0.95

    def __post_init__(self):
        if self.score_kind not in SCORE_KINDS:
            raise ValidationError(f"score_kind must be one of {SCORE_KINDS}, "
                                  f"got {self.score_kind!r}")
        if not 0.0 < self.retention <= 1.0:
            raise ValidationError(f"retention must be in (0, 1], got {self.retention}")


@dataclass(frozen=True)
class AdaptConfig:
    """Settings for one adaptation run.

    ``confidence_threshold`` and ``flatness_gap`` drive the partition;
    ``margin`` is the logit bound for pseudo-unknown rows.  The extractor
    gets its own learning rate since it is the only part carried over from
    pretraining; the three heads share ``lr_heads``.
    """

    epoch_max: int = 50
    batch_size: int = 256
    injection_count: int = 16
    confidence_threshold: float = 0.5
    flatness_gap: float = 0.03
    margin: float = 2.0
    lr_extractor: float = 1e-3
    lr_heads: float = 0.01
    momentum: float = 0.9
    reversal_coefficient: float = 1.0
    frozen_extractor: bool = False
    enable_injection: bool = True
    enable_margin: bool = True
    swap_weight_signs: bool = False
    threshold_on_logits: bool = False
    head_hidden: tuple[int, ...] = (32,)
    convergence_window: int = 5
    convergence_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epoch_max < 0 or self.batch_size < 1 or self.injection_count < 0:
            raise ValidationError("epoch_max, batch_size, injection_count must be nonnegative "
                                  "(batch_size positive)")
        if not self.threshold_on_logits and not 0.0 < self.confidence_threshold < 1.0:
            raise ValidationError("confidence_threshold must be in (0, 1)")
        if self.flatness_gap <= 0 or self.margin < 0:
            raise ValidationError("flatness_gap must be positive and margin nonnegative")
        if self.lr_extractor <= 0 or self.lr_heads <= 0:
            raise ValidationError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")
        if self.convergence_window < 1 or self.convergence_tol <= 0:
            raise ValidationError("convergence window/tolerance must be positive")


@dataclass
class EpochRecord:
    """One epoch of the trace: losses, partition sizes, metrics, checksums."""

    epoch: int
    losses: LossBreakdown
    n_known: int
    n_uncertain: int
    n_unknown: int
    metrics: dict
    checksums: dict[str, str]

    def as_dict(self) -> dict:
        row = {"epoch": self.epoch}
        row.update(self.metrics)
        row.update(self.losses.as_dict())
        # Partition sizes over the whole test set, not per-batch sums.
        row["n_known"] = self.n_known
        row["n_uncertain"] = self.n_uncertain
        row["n_unknown"] = self.n_unknown
        return row


@dataclass
class AdaptTrace:
    records: list[EpochRecord] = field(default_factory=list)
    converged: bool = False
    epochs_run: int = 0


def sgd_update(params: list[T.Tensor], velocity: list[np.ndarray],
               lr: float, momentum: float) -> None:
    """In-place momentum step: v <- m*v + g; p <- p - lr*v."""
    for p, v in zip(params, velocity):
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        v *= momentum
        v += g
        p.values -= lr * v


def batch_iterator(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering 0..n-1 exactly once; last may be short."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _clone_extractor(net: DenseNet) -> DenseNet:
    clone = DenseNet.__new__(DenseNet)
    clone.layers = []
    for layer in net.layers:
        fresh = Linear.__new__(Linear)
        fresh.weight = T.parameter(layer.weight.values.copy())
        fresh.bias = T.parameter(layer.bias.values.copy())
        clone.layers.append(fresh)
    return clone


def _clone_classifier(linear: Linear) -> Linear:
    fresh = Linear.__new__(Linear)
    fresh.weight = T.parameter(linear.weight.values.copy())
    fresh.bias = T.parameter(linear.bias.values.copy())
    return fresh


def build_bundle(start: StartingPoint, config: AdaptConfig) -> ModelBundle:
    """Copy the pretrained parts and attach freshly initialized heads.

    The starting point itself is never mutated; before/after comparisons
    rely on that.
    """
    feature_dim = start.classifier.weight.values.shape[0]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 20])))
    return ModelBundle(
        extractor=_clone_extractor(start.extractor),
        classifier=_clone_classifier(start.classifier),
        matcher=ScalarHead(feature_dim, config.head_hidden, rng),
        detector=ScalarHead(feature_dim, config.head_hidden, rng),
        frozen_extractor=config.frozen_extractor,
    )


def _local_partition(batch_idx: np.ndarray, membership: np.ndarray,
                     pseudo: np.ndarray) -> Partition:
    """Project the full-set partition onto one batch's positions."""
    local = membership[batch_idx]
    known = np.flatnonzero(local == 0)
    return Partition(
        known_idx=known,
        pseudo_labels=pseudo[batch_idx[known]],
        uncertain_idx=np.flatnonzero(local == 1),
        unknown_idx=np.flatnonzero(local == 2),
    )


def snapshot_partition(bundle: ModelBundle, test: Dataset,
                       config: AdaptConfig) -> tuple[Partition, np.ndarray, np.ndarray]:
    """Partition the whole test set with the current classifier.

    Returns the partition plus a per-row membership code (0 known,
    1 uncertain, 2 unknown) and per-row pseudo-labels (0 where not known)
    for projecting onto batches.
    """
    logits = bundle.logits(test.features)
    rows = logits if config.threshold_on_logits else T.np_softmax(logits)
    part = partition_test_set(rows, config.confidence_threshold, config.flatness_gap,
                              rows_are_probabilities=not config.threshold_on_logits)
    membership = np.ones(test.n, dtype=np.int64)
    membership[part.known_idx] = 0
    membership[part.unknown_idx] = 2
    pseudo = np.zeros(test.n, dtype=np.int64)
    pseudo[part.known_idx] = part.pseudo_labels
    return part, membership, pseudo


def evaluate_bundle(bundle: ModelBundle, test: Dataset, train: Dataset | None,
                    options: EvalOptions) -> dict:
    """Headline metrics for the current parameters.

    The rejection cutoff is calibrated on labeled source rows (never on test
    labels); without a source set nothing is rejected.
    """
    logits = bundle.logits(test.features)
    detector = bundle.detector(bundle.features(test.features)).values[:, 0]
    scores = score_rows(logits, detector, options.score_kind)
    if train is not None and train.n:
        train_logits = bundle.logits(train.features)
        train_detector = bundle.detector(bundle.features(train.features)).values[:, 0]
        train_scores = score_rows(train_logits, train_detector, options.score_kind)
        threshold = calibrate_threshold(train_scores, options.retention)
    else:
        threshold = calibrate_threshold(scores, 1.0)
    pred = ScoredPredictions(scores, logits.argmax(axis=1) + 1, test.labels,
                             k=test.k_known, score_kind=options.score_kind)
    return evaluate_predictions(pred, threshold)


def evaluate_start(start: StartingPoint, test: Dataset, train: Dataset | None,
                   options: EvalOptions) -> dict:
    """Same headline metrics for a bare starting point.

    There is no detector head yet, so a detector score request falls back to
    max-logit; the returned score_kind says which one was actually used.
    """
    kind = options.score_kind if options.score_kind != "detector" else "max-logit"
    logits = start.logits(test.features)
    scores = score_rows(logits, None, kind)
    if train is not None and train.n:
        train_scores = score_rows(start.logits(train.features), None, kind)
        threshold = calibrate_threshold(train_scores, options.retention)
    else:
        threshold = calibrate_threshold(scores, 1.0)
    pred = ScoredPredictions(scores, logits.argmax(axis=1) + 1, test.labels,
                             k=test.k_known, score_kind=kind)
    return evaluate_predictions(pred, threshold)


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    if not parts:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, 0)
    return LossBreakdown(
        classifier=float(np.mean([p.classifier for p in parts])),
        adversarial=float(np.mean([p.adversarial for p in parts])),
        detector=float(np.mean([p.detector for p in parts])),
        margin=float(np.mean([p.margin for p in parts])),
        total=float(np.mean([p.total for p in parts])),
        n_known=sum(p.n_known for p in parts),
        n_uncertain=sum(p.n_uncertain for p in parts),
        n_unknown=sum(p.n_unknown for p in parts),
        n_injected=sum(p.n_injected for p in parts),
    )


def run_ossl(start: StartingPoint, test: Dataset, train: Dataset,
             config: AdaptConfig | None = None,
             eval_options: EvalOptions | None = None) -> tuple[ModelBundle, AdaptTrace]:
    """Adapt the starting point on an unlabeled test set.

    Test labels are never read here; they pass through untouched for the
    caller's evaluation.  Raises a training error carrying the partial trace
    if any loss goes non-finite.
    """
    config = config or AdaptConfig()
    eval_options = eval_options or EvalOptions()
    if test.n == 0:
        raise ValidationError("adaptation needs a nonempty test set")
    if test.dim != start.input_dim:
        raise ValidationError(f"test feature dimension {test.dim} != "
                              f"starting point's {start.input_dim}")
    if config.enable_injection and config.injection_count > 0:
        if train is None or train.n < config.injection_count:
            raise ValidationError("source set too small for the injection count")

    bundle = build_bundle(start, config)
    groups = bundle.param_groups()
    all_params = bundle.all_parameters()
    velocity = {name: [np.zeros_like(p.values) for p in params]
                for name, params in groups.items()}

    trace = AdaptTrace()
    totals: list[float] = []
    for epoch in range(config.epoch_max):
        part, membership, pseudo = snapshot_partition(bundle, test, config)
        shuffle_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([config.seed, epoch, 0])))
        batch_parts: list[LossBreakdown] = []
        for bi, batch_idx in enumerate(batch_iterator(test.n, config.batch_size, shuffle_rng)):
            injected = None
            if config.enable_injection and config.injection_count > 0:
                inj_rng = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence([config.seed, epoch, 1, bi])))
                injected = sample_injection_batch(train, config.injection_count, inj_rng)
            local = _local_partition(batch_idx, membership, pseudo)
            T.zero_grads(all_params)
            try:
                total, breakdown = assemble_objective(
                    bundle, test.features[batch_idx], local, injected, test.k_known,
                    margin=config.margin, enable_margin=config.enable_margin,
                    reversal_coefficient=config.reversal_coefficient,
                    swap_weight_signs=config.swap_weight_signs)
            except NumericsError as exc:
                err = TrainingError(str(exc), epoch=epoch)
                err.trace = trace
                raise err from exc
            T.backward(total)
            for name, params in groups.items():
                if name == "extractor":
                    if not config.frozen_extractor:
                        sgd_update(params, velocity[name], config.lr_extractor,
                                   config.momentum)
                else:
                    sgd_update(params, velocity[name], config.lr_heads, config.momentum)
            batch_parts.append(breakdown)

        if not all(np.isfinite(p.values).all() for p in all_params):
            err = TrainingError("parameters went non-finite; lower the learning rates",
                                epoch=epoch)
            err.trace = trace
            raise err

        losses = _mean_breakdown(batch_parts)
        try:
            metrics = evaluate_bundle(bundle, test, train, eval_options)
        except NumericsError as exc:
            # finite parameters can still overflow in the forward pass
            err = TrainingError(f"evaluation blew up: {exc}", epoch=epoch)
            err.trace = trace
            raise err from exc
        record = EpochRecord(
            epoch=epoch, losses=losses,
            n_known=part.known_idx.size, n_uncertain=part.uncertain_idx.size,
            n_unknown=part.unknown_idx.size,
            metrics=metrics,
            checksums=parameter_checksums(bundle.param_groups()),
        )
        trace.records.append(record)
        trace.epochs_run = epoch + 1
        totals.append(losses.total)
        if len(totals) > config.convergence_window:
            anchor = totals[-1 - config.convergence_window]
            if abs(totals[-1] - anchor) / max(1.0, abs(anchor)) < config.convergence_tol:
                trace.converged = True
                break
    return bundle, trace


def config_as_dict(config: AdaptConfig) -> dict:
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out
