"""Shared pytest fixtures for rotset tests.

Configs here are micro-sized (16px crops, a one-block transformer) so
that whole pipelines run in seconds. The small dataset is generated once
per session and shared read-only.
"""

import os

# Pin settings BEFORE importing the app
os.environ.setdefault("EGR_THREADS", "1")
os.environ.setdefault("EGR_LOG_LEVEL", "WARNING")

import numpy as np
import pytest

from app.config import get_settings
from app.schemas import DataConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig
from app.services import autograd as ag
from app.services.model import init_params
from app.services.synthgen import build_dataset


@pytest.fixture(autouse=True)
def _fresh_settings():
    """Drop cached settings so env changes made by a test do not leak."""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def f64():
    with ag.precision("f64"):
        yield


@pytest.fixture
def f32():
    with ag.precision("f32"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _micro_model(**overrides) -> ModelConfig:
    fields = dict(
        d=16, encoder_channels=(4, 8), depth=1, heads=2, mlp_ratio=2,
        rot_hidden=16, head_hidden=16, crop=16, max_tokens=64,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


@pytest.fixture(scope="session")
def micro_model_config() -> ModelConfig:
    return _micro_model()


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    return RunConfig(
        data=DataConfig(n_objects=6, holdout_objects=2, crop=16, n_ref_pool=8, n_query_pool=4, seed=3),
        model=_micro_model(),
        train=TrainConfig(
            objects_per_batch=2, n_ref=4, n_query=2, total_steps=3, lr=1e-3,
            precision="f64", checkpoint_every=0, val_every=0, log_every=1,
        ),
        eval=EvalConfig(k=[2, 4, 8], thresholds=[15.0, 30.0], gaps=[10.0, 50.0], trials=2),
    )


@pytest.fixture(scope="session")
def dataset_path(tmp_path_factory, run_config):
    path = tmp_path_factory.mktemp("data") / "tiny.egrd"
    build_dataset(run_config, path)
    return path


@pytest.fixture(scope="session")
def dataset(dataset_path, run_config):
    from app.storage import load_dataset

    return load_dataset(dataset_path, expected_data_hash=run_config.data_hash())


@pytest.fixture
def micro_params(f64, micro_model_config):
    return init_params(micro_model_config)
