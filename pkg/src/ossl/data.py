"""Synthetic open-set datasets and the on-disk dataset format.

Labels use 1..K for the known classes and 0 as the unknown sentinel, so a
label vector never needs a side channel to say which rows are open-set.
Generators are deterministic in (spec, seed) and files round-trip floats
bit-exactly via repr().
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError

UNKNOWN = 0

_KINDS = ("gaussian-blobs", "concentric-rings", "held-out-split")


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for one synthetic open-set problem."""

    kind: str = "gaussian-blobs"
    k_known: int = 3
    n_unknown: int = 2
    samples_per_class: int = 100
    dim: int = 2
    spread: float = 1.0
    separation: float = 1.8
    unknown_radius: float = 0.15
    unknown_spread: float | None = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown dataset kind {self.kind!r}; expected one of {_KINDS}")
        if self.k_known < 2:
            raise ValidationError(f"need at least 2 known classes, got {self.k_known}")
        if self.n_unknown < 0:
            raise ValidationError(f"n_unknown must be >= 0, got {self.n_unknown}")
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be positive")
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        if self.spread <= 0 or self.separation <= 0:
            raise ValidationError("spread and separation must be positive")
        if self.unknown_radius <= 0:
            raise ValidationError("unknown_radius must be positive")
        if self.unknown_spread is not None and self.unknown_spread <= 0:
            raise ValidationError("unknown_spread must be positive when given")


@dataclass
class Dataset:
    """Feature matrix plus open-set labels.

    ``labels`` is 0 (unknown) or 1..K.  ``origin`` keeps the pre-remap class
    id of every row so unknown rows stay distinguishable from each other.
    """

    features: np.ndarray
    labels: np.ndarray
    k_known: int
    origin: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels length does not match feature rows")
        if self.origin is None:
            self.origin = self.labels.copy()
        else:
            self.origin = np.asarray(self.origin, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.k_known):
            raise DataError(f"labels must lie in [0, {self.k_known}]")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def known_mask(self) -> np.ndarray:
        return self.labels != UNKNOWN

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.k_known, self.origin[idx])


def _class_means(spec: DatasetSpec) -> np.ndarray:
    """Distinct class centers for the blob generator.

    Known classes sit on a circle of radius ``separation``.  Unknown classes
    sit in the interior at ``unknown_radius * separation``, rotated between
    the known directions, so their samples fall where the known classes
    compete rather than inside one class's confident region.
    """
    total = spec.k_known + spec.n_unknown
    means = np.zeros((total, spec.dim))
    if spec.kind == "concentric-rings":
        return means  # rings are centered; radius carries the class
    known_angles = 2.0 * np.pi * np.arange(spec.k_known) / spec.k_known
    means[:spec.k_known, 0] = spec.separation * np.cos(known_angles)
    if spec.dim >= 2:
        means[:spec.k_known, 1] = spec.separation * np.sin(known_angles)
    if spec.n_unknown:
        inner = spec.unknown_radius * spec.separation
        offsets = 2.0 * np.pi * (np.arange(spec.n_unknown) + 0.5) / spec.n_unknown
        means[spec.k_known:, 0] = inner * np.cos(offsets)
        if spec.dim >= 2:
            means[spec.k_known:, 1] = inner * np.sin(offsets)
    return means


def generate(spec: DatasetSpec) -> tuple["Dataset", "Dataset"]:
    """Build a (source, test) pair from one spec.

    The source set has only known-class rows.  The test set redraws every
    class, including the held-out unknowns, from the same distributions with
    an independent stream, so source and test are disjoint samples.
    """
    if spec.kind == "held-out-split":
        pool = _generate_pool(replace(spec, kind="gaussian-blobs"))
        return split_open_set(pool.features, pool.origin,
                              known_class_ids=list(range(1, spec.k_known + 1)),
                              train_fraction=0.5, seed=spec.seed)
    source = _draw(spec, unknowns=False, stream=0)
    test = _draw(spec, unknowns=True, stream=1)
    return source, test


def _generate_pool(spec: DatasetSpec) -> Dataset:
    return _draw(spec, unknowns=True, stream=0)


def _draw(spec: DatasetSpec, unknowns: bool, stream: int) -> Dataset:
    total = spec.k_known + (spec.n_unknown if unknowns else 0)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, stream])))
    means = _class_means(spec)
    rows, labels = [], []
    for cls in range(total):
        if spec.kind == "concentric-rings":
            radius = (cls + 1) * spec.separation
            theta = rng.uniform(0.0, 2.0 * np.pi, size=spec.samples_per_class)
            pts = np.zeros((spec.samples_per_class, spec.dim))
            pts[:, 0] = radius * np.cos(theta)
            if spec.dim >= 2:
                pts[:, 1] = radius * np.sin(theta)
            pts += rng.normal(0.0, spec.spread, size=pts.shape)
        else:
            sigma = spec.spread
            if cls >= spec.k_known and spec.unknown_spread is not None:
                sigma = spec.unknown_spread
            pts = means[cls] + rng.normal(0.0, sigma,
                                          size=(spec.samples_per_class, spec.dim))
        rows.append(pts)
        label = cls + 1 if cls < spec.k_known else UNKNOWN
        labels.append(np.full(spec.samples_per_class, label, dtype=np.int64))
    features = np.vstack(rows)
    label_vec = np.concatenate(labels)
    origin = np.repeat(np.arange(1, total + 1), spec.samples_per_class)
    perm = rng.permutation(features.shape[0])
    return Dataset(features[perm], label_vec[perm], spec.k_known, origin[perm])


def split_open_set(features: np.ndarray, labels: np.ndarray, known_class_ids,
                   train_fraction: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Carve an open-set problem out of a fully labeled pool.

    Classes in ``known_class_ids`` are remapped to contiguous 1..K in the
    order given; every other class becomes the unknown sentinel.  The source
    side holds ``train_fraction`` of each known class and no unknowns; the
    test side holds the rest plus all unknown rows.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    known_class_ids = list(known_class_ids)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise DataError("pool features/labels shapes do not line up")
    if len(set(known_class_ids)) != len(known_class_ids) or len(known_class_ids) < 2:
        raise ValidationError("known_class_ids must be >= 2 distinct classes")
    missing = [c for c in known_class_ids if c not in labels]
    if missing:
        raise DataError(f"known classes absent from pool: {missing}")
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")

    remap = {orig: new for new, orig in enumerate(known_class_ids, start=1)}
    k = len(known_class_ids)
    new_labels = np.array([remap.get(int(c), UNKNOWN) for c in labels], dtype=np.int64)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    train_idx, test_idx = [], []
    for orig in known_class_ids:
        rows = np.flatnonzero(labels == orig)
        rows = rows[rng.permutation(rows.size)]
        cut = int(round(train_fraction * rows.size))
        cut = min(max(cut, 1), rows.size - 1) if rows.size > 1 else 1
        train_idx.extend(rows[:cut])
        test_idx.extend(rows[cut:])
    test_idx.extend(np.flatnonzero(new_labels == UNKNOWN))

    train_idx = np.array(sorted(train_idx), dtype=np.intp)
    test_idx = np.array(sorted(test_idx), dtype=np.intp)
    source = Dataset(features[train_idx], new_labels[train_idx], k, labels[train_idx])
    test = Dataset(features[test_idx], new_labels[test_idx], k, labels[test_idx])
    return source, test


def sample_injection_batch(train: Dataset, count: int, rng: np.random.Generator) -> Dataset:
    """Draw ``count`` labeled source rows without replacement."""
    if count < 0:
        raise ValidationError(f"injection count must be >= 0, got {count}")
    if count > train.n:
        raise DataError(f"cannot draw {count} rows from a source set of {train.n}")
    idx = rng.choice(train.n, size=count, replace=False)
    return train.subset(idx)


# ---------------------------------------------------------------------------
# file format: header line, metadata line, then one CSV row per sample


_MAGIC = "ossl-dataset v1"


def save_dataset(ds: Dataset, path: str | Path) -> None:
    buf = io.StringIO()
    buf.write(_MAGIC + "\n")
    buf.write(f"n={ds.n} d={ds.dim} k={ds.k_known}\n")
    for i in range(ds.n):
        cells = [repr(float(v)) for v in ds.features[i]]
        cells.append(str(int(ds.labels[i])))
        cells.append(str(int(ds.origin[i])))
        buf.write(",".join(cells) + "\n")
    Path(path).write_text(buf.getvalue())


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise DataError(f"{path} is not an ossl dataset (bad header)")
    try:
        meta = dict(kv.split("=") for kv in lines[1].split())
        n, d, k = int(meta["n"]), int(meta["d"]), int(meta["k"])
    except (IndexError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed metadata line") from exc
    if len(lines) - 2 != n:
        raise DataError(f"{path}: expected {n} rows, found {len(lines) - 2}")
    features = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    origin = np.empty(n, dtype=np.int64)
    for i, line in enumerate(lines[2:]):
        cells = line.split(",")
        if len(cells) != d + 2:
            raise DataError(f"{path}: row {i} has {len(cells)} cells, expected {d + 2}")
        try:
            features[i] = [float(c) for c in cells[:d]]
            labels[i] = int(cells[d])
            origin[i] = int(cells[d + 1])
        except ValueError as exc:
            raise DataError(f"{path}: row {i} does not parse") from exc
    return Dataset(features, labels, k, origin)
