"""Request and response models for the service and CLI surfaces.

Config sub-models are generated from the library dataclasses so the two
layers cannot drift apart; semantic validation stays in the dataclass
constructors.  All models reject unknown keys, which is what catches config
typos at the boundary instead of deep inside a run.
"""

from __future__ import annotations

import dataclasses
from typing import get_type_hints

from pydantic import BaseModel, ConfigDict, create_model

from .adapt import AdaptConfig, EvalOptions
from .data import DatasetSpec
from .model import SourceConfig

_STRICT = ConfigDict(extra="forbid")


def _from_dataclass(name: str, dc: type) -> type[BaseModel]:
    hints = get_type_hints(dc)
    spec = {}
    for f in dataclasses.fields(dc):
        default = f.default if f.default is not dataclasses.MISSING else ...
        spec[f.name] = (hints[f.name], default)
    return create_model(name, __config__=_STRICT, **spec)


DatasetSpecModel = _from_dataclass("DatasetSpecModel", DatasetSpec)
SourceConfigModel = _from_dataclass("SourceConfigModel", SourceConfig)
AdaptConfigModel = _from_dataclass("AdaptConfigModel", AdaptConfig)
EvalOptionsModel = _from_dataclass("EvalOptionsModel", EvalOptions)


def to_dataclass(model: BaseModel, dc: type):
    """Validated model -> library dataclass (list fields become tuples)."""
    data = model.model_dump()
    for key, value in data.items():
        if isinstance(value, list):
            data[key] = tuple(value)
    return dc(**data)


class _Request(BaseModel):
    model_config = _STRICT

    output_root: str | None = None   # falls back to OSSL_OUTPUT_ROOT, then ./runs
    run_name: str | None = None


class GenDataRequest(_Request):
    spec: DatasetSpecModel = DatasetSpecModel()


class TrainSourceRequest(_Request):
    train_path: str
    config: SourceConfigModel = SourceConfigModel()


class AdaptRequest(_Request):
    checkpoint_path: str
    test_path: str
    train_path: str | None = None    # labeled source rows for injection + calibration
    adapt: AdaptConfigModel = AdaptConfigModel()
    eval: EvalOptionsModel = EvalOptionsModel()


class EvaluateRequest(_Request):
    checkpoint_path: str
    test_path: str
    train_path: str | None = None
    eval: EvalOptionsModel = EvalOptionsModel()


class SweepRequest(_Request):
    spec: DatasetSpecModel = DatasetSpecModel()
    source: SourceConfigModel = SourceConfigModel()
    adapt: AdaptConfigModel = AdaptConfigModel()
    eval: EvalOptionsModel = EvalOptionsModel()
    confidence_grid: list[float] = [0.3, 0.4, 0.5, 0.6, 0.7]
    flatness_grid: list[float] = [0.01, 0.02, 0.03, 0.04, 0.05]
    seeds: list[int] = [0, 1, 2, 3, 4]


class AblateRequest(_Request):
    spec: DatasetSpecModel = DatasetSpecModel()
    source: SourceConfigModel = SourceConfigModel()
    adapt: AdaptConfigModel = AdaptConfigModel()
    eval: EvalOptionsModel = EvalOptionsModel()
    injection_counts: list[int] = [16]   # 0 (no injection) is always included
    seeds: list[int] = [0, 1, 2, 3, 4]


class MetricsReport(BaseModel):
    model_config = _STRICT

    auroc: float
    macro_f1: float
    acc: float
    threshold: float
    score_kind: str


class GenDataResponse(BaseModel):
    model_config = _STRICT

    run_dir: str
    train_path: str
    test_path: str
    n_train: int
    n_test: int
    k_known: int


class TrainSourceResponse(BaseModel):
    model_config = _STRICT

    run_dir: str
    checkpoint_path: str
    train_accuracy: float
    holdout_accuracy: float
    checksums: dict[str, str]


class AdaptResponse(BaseModel):
    model_config = _STRICT

    run_dir: str
    checkpoint_path: str
    metrics_csv: str
    metrics_json: str
    before: MetricsReport
    after: MetricsReport
    epochs_run: int
    converged: bool


class EvaluateResponse(BaseModel):
    model_config = _STRICT

    run_dir: str
    checkpoint_kind: str
    metrics: MetricsReport


class TableResponse(BaseModel):
    model_config = _STRICT

    run_dir: str
    table_csv: str
    table_json: str
    n_rows: int
    n_failed: int


class HealthResponse(BaseModel):
    model_config = _STRICT

    status: str
    version: str
