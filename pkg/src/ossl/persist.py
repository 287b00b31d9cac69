"""Save and restore trained models on top of the block checkpoint format.

Two kinds of file share the container: a pretrained starting point
(extractor + classifier) and a fully adapted bundle (plus matcher and
detector heads).  The meta block records enough structure to rebuild the
networks without touching any RNG, so loading never perturbs seeding.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError
from .model import DenseNet, Linear, ModelBundle, ScalarHead, SourceConfig, StartingPoint

KIND_START = "starting-point"
KIND_ADAPTED = "adapted"


def _dense_blocks(prefix: str, net: DenseNet, out: dict[str, np.ndarray]) -> None:
    for i, layer in enumerate(net.layers):
        out[f"{prefix}.{i}.weight"] = layer.weight.values
        out[f"{prefix}.{i}.bias"] = layer.bias.values


def _linear_from_blocks(prefix: str, blocks: dict[str, np.ndarray]) -> Linear:
    try:
        weight = blocks[f"{prefix}.weight"]
        bias = blocks[f"{prefix}.bias"]
    except KeyError as missing:
        raise DataError(f"checkpoint is missing block {missing.args[0]!r}") from None
    if weight.ndim != 2 or bias.ndim != 1 or weight.shape[1] != bias.shape[0]:
        raise DataError(f"checkpoint block shapes for {prefix!r} are inconsistent")
    layer = Linear.__new__(Linear)
    layer.weight = T.parameter(weight.copy())
    layer.bias = T.parameter(bias.copy())
    return layer


def _dense_from_blocks(prefix: str, n_layers: int, blocks: dict[str, np.ndarray]) -> DenseNet:
    if n_layers < 1:
        raise DataError("checkpoint records an empty network")
    net = DenseNet.__new__(DenseNet)
    net.layers = [_linear_from_blocks(f"{prefix}.{i}", blocks) for i in range(n_layers)]
    for a, b in zip(net.layers[:-1], net.layers[1:]):
        if a.weight.values.shape[1] != b.weight.values.shape[0]:
            raise DataError(f"checkpoint layer sizes do not chain in {prefix!r}")
    return net


def _head_from_blocks(prefix: str, n_layers: int, blocks: dict[str, np.ndarray]) -> ScalarHead:
    head = ScalarHead.__new__(ScalarHead)
    head.net = _dense_from_blocks(prefix, n_layers, blocks)
    if head.net.layers[-1].weight.values.shape[1] != 1:
        raise DataError(f"checkpoint head {prefix!r} must end in one unit")
    return head


def save_starting_point(path: str | Path, start: StartingPoint) -> None:
    blocks: dict[str, np.ndarray] = {}
    _dense_blocks("extractor", start.extractor, blocks)
    blocks["classifier.weight"] = start.classifier.weight.values
    blocks["classifier.bias"] = start.classifier.bias.values
    meta = {
        "kind": KIND_START,
        "k_known": start.k_known,
        "input_dim": start.input_dim,
        "extractor_layers": len(start.extractor.layers),
        "train_accuracy": start.train_accuracy,
        "holdout_accuracy": start.holdout_accuracy,
        "config": dataclasses.asdict(start.config),
    }
    save_checkpoint(path, meta, blocks)


def _source_config(raw: dict) -> SourceConfig:
    raw = dict(raw)
    raw["extractor_hidden"] = tuple(raw.get("extractor_hidden", ()))
    try:
        return SourceConfig(**raw)
    except TypeError as err:
        raise DataError(f"checkpoint carries an unreadable source config: {err}") from None


def load_starting_point(path: str | Path) -> StartingPoint:
    meta, blocks = load_checkpoint(path)
    if meta.get("kind") != KIND_START:
        raise DataError(f"{path} is not a starting-point checkpoint")
    extractor = _dense_from_blocks("extractor", int(meta["extractor_layers"]), blocks)
    classifier = _linear_from_blocks("classifier", blocks)
    start = StartingPoint(
        extractor=extractor,
        classifier=classifier,
        config=_source_config(meta["config"]),
        k_known=int(meta["k_known"]),
        input_dim=int(meta["input_dim"]),
        train_accuracy=float(meta["train_accuracy"]),
        holdout_accuracy=float(meta["holdout_accuracy"]),
    )
    if start.classifier.weight.values.shape[1] != start.k_known:
        raise DataError("checkpoint classifier width disagrees with k_known")
    if start.extractor.layers[0].weight.values.shape[0] != start.input_dim:
        raise DataError("checkpoint extractor input disagrees with input_dim")
    return start


def save_bundle(path: str | Path, bundle: ModelBundle, k_known: int,
                input_dim: int, config: dict) -> None:
    """Persist an adapted bundle; ``config`` is the adaptation config as a dict."""
    blocks: dict[str, np.ndarray] = {}
    _dense_blocks("extractor", bundle.extractor, blocks)
    blocks["classifier.weight"] = bundle.classifier.weight.values
    blocks["classifier.bias"] = bundle.classifier.bias.values
    _dense_blocks("matcher", bundle.matcher.net, blocks)
    _dense_blocks("detector", bundle.detector.net, blocks)
    meta = {
        "kind": KIND_ADAPTED,
        "k_known": k_known,
        "input_dim": input_dim,
        "extractor_layers": len(bundle.extractor.layers),
        "head_layers": len(bundle.matcher.net.layers),
        "frozen_extractor": bundle.frozen_extractor,
        "config": config,
    }
    save_checkpoint(path, meta, blocks)


def load_bundle(path: str | Path) -> tuple[ModelBundle, dict]:
    meta, blocks = load_checkpoint(path)
    if meta.get("kind") != KIND_ADAPTED:
        raise DataError(f"{path} is not an adapted checkpoint")
    n_ext = int(meta["extractor_layers"])
    n_head = int(meta["head_layers"])
    bundle = ModelBundle(
        extractor=_dense_from_blocks("extractor", n_ext, blocks),
        classifier=_linear_from_blocks("classifier", blocks),
        matcher=_head_from_blocks("matcher", n_head, blocks),
        detector=_head_from_blocks("detector", n_head, blocks),
        frozen_extractor=bool(meta.get("frozen_extractor", False)),
    )
    if bundle.classifier.weight.values.shape[1] != int(meta["k_known"]):
        raise DataError("checkpoint classifier width disagrees with k_known")
    return bundle, meta


def checkpoint_kind(path: str | Path) -> str:
    meta, _ = load_checkpoint(path)
    kind = meta.get("kind")
    if kind not in (KIND_START, KIND_ADAPTED):
        raise DataError(f"{path} has unknown checkpoint kind {kind!r}")
    return kind
