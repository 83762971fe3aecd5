"""Regime-aware volatility forecasting with pairwise Markov chains."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("pmc_volatility")
except PackageNotFoundError:
    __version__ = "0+unknown"
