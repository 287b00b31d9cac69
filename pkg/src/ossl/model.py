"""Network blocks and closed-set pretraining.

The adaptable model is four parts sharing one feature space: a dense
extractor, a linear classifier over the known classes, and two scalar heads
(a domain matcher and a known/unknown detector).  Pretraining fits the
extractor and classifier on labeled source data with label smoothing; the
result is the frozen starting point every adaptation run begins from.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import TrainingError, ValidationError
from .tensor import Tensor


class Linear:
    """Affine layer with uniform +-1/sqrt(fan_in) init for weight and bias."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = T.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = T.parameter(rng.uniform(-bound, bound, size=(fan_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class DenseNet:
    """Stack of Linear layers with ReLU between them; the last layer is linear."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValidationError("DenseNet needs at least input and output sizes")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class ScalarHead:
    """Small MLP ending in a sigmoid clipped away from 0 and 1.

    The clip keeps log terms bounded when the head saturates, which the
    adversarial and detection losses rely on.
    """

    def __init__(self, feature_dim: int, hidden: tuple[int, ...], rng: np.random.Generator):
        self.net = DenseNet([feature_dim, *hidden, 1], rng)

    def __call__(self, feats: Tensor) -> Tensor:
        raw = T.sigmoid(self.net(feats))
        return T.clip(raw, T.LOG_EPS, 1.0 - T.LOG_EPS)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


@dataclass
class ModelBundle:
    """The four jointly adapted parts plus the freeze switch for the extractor."""

    extractor: DenseNet
    classifier: Linear
    matcher: ScalarHead
    detector: ScalarHead
    frozen_extractor: bool = False

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {
            "extractor": self.extractor.parameters(),
            "classifier": self.classifier.parameters(),
            "matcher": self.matcher.parameters(),
            "detector": self.detector.parameters(),
        }

    def all_parameters(self) -> list[Tensor]:
        return [p for group in self.param_groups().values() for p in group]

    def features(self, x: np.ndarray) -> Tensor:
        return self.extractor(T.constant(x))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.classifier(self.features(x)).values


@dataclass(frozen=True)
class SourceConfig:
    """Closed-set pretraining settings."""

    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    label_smoothing: float = 0.1
    holdout_fraction: float = 0.2
    extractor_hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must be in [0, 1)")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValidationError("holdout_fraction must be in [0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.feature_dim < 1:
            raise ValidationError("lr, batch_size and feature_dim must be positive")


@dataclass
class StartingPoint:
    """Pretrained extractor + classifier and their source-side accuracies."""

    extractor: DenseNet
    classifier: Linear
    config: SourceConfig
    k_known: int
    input_dim: int
    train_accuracy: float
    holdout_accuracy: float

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.classifier.parameters()

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.classifier(self.extractor(T.constant(x))).values


def smoothed_targets(labels: np.ndarray, k: int, smoothing: float) -> np.ndarray:
    """One-hot rows blended toward uniform: 1-s on the label, s/(K-1) elsewhere.

    ``labels`` are open-set ids 1..K; the sentinel 0 is rejected because the
    classifier has no unknown column.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise ValidationError("classifier targets must be known classes 1..K")
    out = np.full((labels.size, k), smoothing / (k - 1))
    out[np.arange(labels.size), labels - 1] = 1.0 - smoothing
    return out


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        return float("nan")
    return float(np.mean(logits.argmax(axis=1) + 1 == labels))


def train_starting_point(source: Dataset, config: SourceConfig | None = None) -> StartingPoint:
    """Fit extractor + classifier on labeled known-class data with SGD."""
    config = config or SourceConfig()
    if np.any(source.labels == 0):
        raise ValidationError("source data for pretraining must contain only known classes")
    k = source.k_known

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 10])))
    extractor = DenseNet([source.dim, *config.extractor_hidden, config.feature_dim], rng)
    classifier = Linear(config.feature_dim, k, rng)
    params = extractor.parameters() + classifier.parameters()
    velocity = [np.zeros_like(p.values) for p in params]

    n_hold = int(round(config.holdout_fraction * source.n))
    order = rng.permutation(source.n)
    hold = source.subset(order[:n_hold])
    train = source.subset(order[n_hold:])

    for epoch in range(config.epochs):
        perm = rng.permutation(train.n)
        for start in range(0, train.n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            targets = smoothed_targets(train.labels[idx], k, config.label_smoothing)
            T.zero_grads(params)
            logits = classifier(extractor(T.constant(train.features[idx])))
            loss = T.cross_entropy(logits, targets)
            if not np.isfinite(loss.values).all():
                raise TrainingError("pretraining loss diverged", epoch=epoch)
            T.backward(loss)
            for p, v in zip(params, velocity):
                g = p.grad if p.grad is not None else 0.0
                v *= config.momentum
                v += g
                p.values -= config.lr * v

    train_acc = _accuracy(classifier(extractor(T.constant(train.features))).values, train.labels)
    hold_acc = (_accuracy(classifier(extractor(T.constant(hold.features))).values, hold.labels)
                if hold.n else train_acc)
    return StartingPoint(extractor, classifier, config, k, source.dim, train_acc, hold_acc)


def parameter_checksums(groups: dict[str, list[Tensor]]) -> dict[str, str]:
    """sha256 over the concatenated raw float64 bytes of each group."""
    out = {}
    for name, params in groups.items():
        h = hashlib.sha256()
        for p in params:
            h.update(np.ascontiguousarray(p.values).tobytes())
        out[name] = h.hexdigest()
    return out


def clone_parameters(params: list[Tensor]) -> list[np.ndarray]:
    return [p.values.copy() for p in params]


def restore_parameters(params: list[Tensor], saved: list[np.ndarray]) -> None:
    for p, s in zip(params, saved):
        p.values[...] = s
