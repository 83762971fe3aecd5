import numpy as np
import pytest
from pmc_volatility.data import build_features, prepare_dataset
from pmc_volatility.synth import default_benchmark_spec, generate


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow experiments"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def random_pairs():
    """Normalized-looking feature pairs drawn from a fixed seed."""

    def make(seed: int, length: int):
        rng = np.random.default_rng(seed)
        return [tuple(row) for row in rng.normal(size=(length, 2)).tolist()]

    return make


@pytest.fixture(scope="session")
def small_dataset():
    """50 hourly rows of the benchmark process, split 20/20/10."""
    series = generate(default_benchmark_spec(seed=3), 50)
    return prepare_dataset(build_features(series.prices), name="bench")
