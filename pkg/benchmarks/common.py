from functools import lru_cache

from pmc_volatility.data import Dataset, build_features, prepare_dataset
from pmc_volatility.synth import default_benchmark_spec, generate


@lru_cache(maxsize=None)
def setup_dataset(hours: int = 500) -> Dataset:
    """Features of `hours` simulated hours of the default regime benchmark."""
    series = generate(default_benchmark_spec(seed=0), hours)
    return prepare_dataset(build_features(series.prices), name=f"bench{hours}")
