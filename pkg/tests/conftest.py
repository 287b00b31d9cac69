import numpy as np
import pytest

from ossl.adapt import AdaptConfig
from ossl.data import DatasetSpec, generate
from ossl.model import SourceConfig, train_starting_point

# Source settings that pair with the default blob geometry at this scale:
# a soft, narrow model leaves enough headroom for adaptation to matter.
DESK_SOURCE = dict(label_smoothing=0.2, extractor_hidden=(32,), feature_dim=16)
DESK_ADAPT = dict(confidence_threshold=0.7, flatness_gap=0.15)


def desk_source_config(seed: int, **overrides) -> SourceConfig:
    return SourceConfig(**{**DESK_SOURCE, "seed": seed, **overrides})


def desk_adapt_config(seed: int, **overrides) -> AdaptConfig:
    return AdaptConfig(**{**DESK_ADAPT, "seed": seed, **overrides})


@pytest.fixture(scope="session")
def pipeline():
    """Cached (source, test, starting point) per seed; training is the slow part."""
    cache = {}

    def get(seed: int = 0, **source_overrides):
        key = (seed, tuple(sorted(source_overrides.items())))
        if key not in cache:
            source, test = generate(DatasetSpec(seed=seed))
            start = train_starting_point(source, desk_source_config(seed, **source_overrides))
            cache[key] = (source, test, start)
        return cache[key]

    return get


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("OSSL_OUTPUT_ROOT", str(tmp_path))
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
