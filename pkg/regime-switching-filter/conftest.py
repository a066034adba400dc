import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from services.model_service import (  # noqa: E402
    IntensityMatrix,
    ModelParams,
    ObservationFunction,
    StateSpace,
)

PROJECT_DIR = Path(__file__).resolve().parent
CONFIG_DIR = PROJECT_DIR / "configs"


def pytest_collection_modifyitems(config, items):
    if os.getenv("REGIME_FILTER_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set REGIME_FILTER_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_params(**changes) -> ModelParams:
    fields = dict(
        space=StateSpace(values=(-10 / 3, 10 / 3)),
        q=IntensityMatrix.two_state(10.0, 5.0),
        epsilon=0.01,
        h=ObservationFunction.linear(10.0),
        delta_t=0.01,
        m=5,
        n_obs=200,
        seed=1,
    )
    fields.update(changes)
    return ModelParams(**fields)


@pytest.fixture
def benchmark_params() -> ModelParams:
    return make_params()


@pytest.fixture
def small_params() -> ModelParams:
    return make_params(epsilon=0.02, delta_t=0.05, m=2, n_obs=20, seed=7)


@pytest.fixture
def config_dir() -> Path:
    return CONFIG_DIR
