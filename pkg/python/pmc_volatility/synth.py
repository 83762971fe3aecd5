"""Markov regime-switching GARCH(1, 1) price simulator with known regimes."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pmc_volatility.data import PriceSeries, write_prices_csv
from pmc_volatility.errors import InvalidInputError
from pmc_volatility.markov import stationary_distribution

logger = logging.getLogger(__name__)

DEFAULT_BENCHMARK_HOURS = 6000
ROW_TOLERANCE = 1e-9


class RegimeParams(BaseModel):
    """Stationary GARCH(1, 1) parameters of one regime."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    omega: float = Field(gt=0)
    alpha: float = Field(ge=0)
    beta: float = Field(ge=0)

    @model_validator(mode="after")
    def _stationary(self):
        if not self.alpha + self.beta < 1:
            raise ValueError(
                f"alpha + beta must be below 1, got {self.alpha + self.beta}"
            )
        return self

    @property
    def unconditional_variance(self) -> float:
        return self.omega / (1.0 - self.alpha - self.beta)


class RegimeSpec(BaseModel):
    """Regimes, their switching matrix and the simulation seed.

    Innovations are standard normal. Without `initial_regime` the first
    regime is drawn from the stationary law of `transition`.

    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    regimes: List[RegimeParams] = Field(min_length=1)
    transition: List[List[float]]
    seed: int = Field(0, ge=0)
    initial_regime: Optional[int] = Field(None, ge=0)
    start_price: float = Field(100.0, gt=0)
    start_minute: int = 0

    @model_validator(mode="after")
    def _check_transition(self):
        k = len(self.regimes)
        matrix = np.asarray(self.transition, dtype=np.float64)
        if matrix.shape != (k, k):
            raise ValueError(
                f"The transition matrix must be {k}x{k}, got {matrix.shape}"
            )
        if np.any(matrix < 0) or np.any(np.abs(matrix.sum(axis=1) - 1.0) > ROW_TOLERANCE):
            raise ValueError("Transition rows must be nonnegative and sum to 1")
        if self.initial_regime is not None and self.initial_regime >= k:
            raise ValueError(f"initial_regime must be below {k}")
        return self

    @property
    def n_regimes(self) -> int:
        return len(self.regimes)

    def transition_matrix(self) -> np.ndarray:
        return np.asarray(self.transition, dtype=np.float64)


def default_benchmark_spec(seed: int = 0) -> RegimeSpec:
    """Two persistent regimes with a five-fold gap in unconditional variance."""
    return RegimeSpec(
        regimes=[
            RegimeParams(omega=1e-6, alpha=0.05, beta=0.90),
            RegimeParams(omega=5e-6, alpha=0.15, beta=0.80),
        ],
        transition=[[0.98, 0.02], [0.02, 0.98]],
        seed=seed,
    )


@dataclass(frozen=True, eq=False)
class SyntheticSeries:
    """Simulated prices with the hidden truth behind them.

    Attributes
    ----------
    prices
        `minutes_per_hour * T + 1` minute open prices.
    regimes
        Active regime of each hour.
    variances
        Conditional variance of each hourly return.
    hourly_returns
        Sum of each hour's minute log-returns.

    """

    prices: PriceSeries
    regimes: np.ndarray
    variances: np.ndarray
    hourly_returns: np.ndarray


def generate(
    spec: RegimeSpec, T_hours: int, minutes_per_hour: int = 60
) -> SyntheticSeries:
    """Simulate `T_hours` of regime-switching GARCH prices.

    Hour `t` draws its regime from the row of the previous regime, sets
    `h_t = omega + alpha * r_{t-1}^2 + beta * h_{t-1}` with that regime's
    parameters, then splits `r_t` into `minutes_per_hour` i.i.d. normal
    minute returns of variance `h_t / minutes_per_hour`. The first hour
    starts at its regime's unconditional variance.

    """
    if T_hours < 1:
        raise InvalidInputError(f"At least one hour is needed, got {T_hours}")
    if minutes_per_hour < 1:
        raise InvalidInputError(
            f"minutes_per_hour must be positive, got {minutes_per_hour}"
        )
    rng = np.random.default_rng(spec.seed)
    matrix = spec.transition_matrix()
    k = spec.n_regimes
    params = spec.regimes

    regimes = np.empty(T_hours, dtype=np.int64)
    variances = np.empty(T_hours)
    minutes = np.empty((T_hours, minutes_per_hour))
    if spec.initial_regime is None:
        regime = int(rng.choice(k, p=stationary_distribution(matrix)))
    else:
        regime = spec.initial_regime

    variance = params[regime].unconditional_variance
    previous_return = 0.0
    for t in range(T_hours):
        if t > 0:
            regime = int(rng.choice(k, p=matrix[regime]))
            p = params[regime]
            variance = p.omega + p.alpha * previous_return**2 + p.beta * variance
        regimes[t] = regime
        variances[t] = variance
        minutes[t] = rng.standard_normal(minutes_per_hour) * np.sqrt(
            variance / minutes_per_hour
        )
        previous_return = float(minutes[t].sum())

    log_prices = np.concatenate([[0.0], np.cumsum(minutes.ravel())])
    prices = PriceSeries.from_opens(
        spec.start_price * np.exp(log_prices), start=spec.start_minute
    )
    logger.debug(
        "Simulated %d hours, regime occupancy %s",
        T_hours,
        np.bincount(regimes, minlength=k) / T_hours,
    )
    return SyntheticSeries(prices, regimes, variances, minutes.sum(axis=1))


def write_regimes_csv(regimes: np.ndarray, path: Union[str, Path]):
    frame = pd.DataFrame({"hour": np.arange(len(regimes)), "regime": regimes})
    frame.to_csv(path, index=False)


def read_regimes_csv(path: Union[str, Path]) -> np.ndarray:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InvalidInputError(f"Cannot parse {path}: {e}") from e
    if "regime" not in frame.columns:
        raise InvalidInputError(f"{path} lacks a regime column")
    return frame["regime"].to_numpy(dtype=np.int64)


def write_synthetic(series: SyntheticSeries, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write `prices.csv` and `regimes.csv` under `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prices_path = out_dir / "prices.csv"
    regimes_path = out_dir / "regimes.csv"
    write_prices_csv(series.prices, prices_path)
    write_regimes_csv(series.regimes, regimes_path)
    return prices_path, regimes_path


__all__ = [
    "DEFAULT_BENCHMARK_HOURS",
    "RegimeParams",
    "RegimeSpec",
    "SyntheticSeries",
    "default_benchmark_spec",
    "generate",
    "read_regimes_csv",
    "write_regimes_csv",
    "write_synthetic",
]
