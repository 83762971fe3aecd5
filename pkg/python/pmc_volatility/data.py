"""Price ingestion, volatility features, normalization and chronological splits."""
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import jsonschema
import numpy as np
import pandas as pd

from pmc_volatility.errors import (
    ConfigError,
    DegenerateDataError,
    InvalidInputError,
)

logger = logging.getLogger(__name__)

CHANNELS = ("sigma2", "u60sq")
FEATURE_COLUMNS = ["index", "sigma2", "u60sq", "sigma2_norm", "u60sq_norm"]
FEATURE_FLOOR = 1e-12
FLOAT_FORMAT = "%.17g"

IndexRange = Union[slice, range, Tuple[int, int]]


@dataclass(frozen=True)
class PricePoint:
    """A 1-minute open price.

    Attributes
    ----------
    timestamp
        Minutes since the Unix epoch.
    open
        The open price, strictly positive.

    """

    timestamp: int
    open: float

    def __post_init__(self):
        if not self.open > 0:
            raise InvalidInputError(f"Price must be positive, got {self.open}")


@dataclass(frozen=True, eq=False)
class PriceSeries:
    """A sequence of 1-minute open prices with strictly increasing timestamps.

    Positivity of the prices is checked by `log_returns`, which names the
    offending index.

    """

    timestamps: np.ndarray
    opens: np.ndarray

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps, dtype=np.int64)
        opens = np.asarray(self.opens, dtype=np.float64)
        if timestamps.shape != opens.shape or timestamps.ndim != 1:
            raise InvalidInputError("Timestamps and prices must be 1-d and aligned")
        steps = np.diff(timestamps)
        if steps.size and np.any(steps <= 0):
            index = int(np.argmax(steps <= 0)) + 1
            raise InvalidInputError(
                f"Timestamps must be strictly increasing (index {index})",
                index=index,
            )
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "opens", opens)

    @classmethod
    def from_points(cls, points: Sequence[PricePoint]) -> "PriceSeries":
        return cls(
            np.array([p.timestamp for p in points], dtype=np.int64),
            np.array([p.open for p in points], dtype=np.float64),
        )

    @classmethod
    def from_opens(cls, opens: Sequence[float], start: int = 0) -> "PriceSeries":
        """Build a series with consecutive minute timestamps."""
        opens = np.asarray(opens, dtype=np.float64)
        return cls(np.arange(start, start + len(opens), dtype=np.int64), opens)

    def __len__(self) -> int:
        return len(self.opens)

    def points(self) -> List[PricePoint]:
        return [
            PricePoint(int(t), float(s)) for t, s in zip(self.timestamps, self.opens)
        ]


@dataclass(frozen=True, eq=False)
class ReturnSeries:
    """1-minute log-returns; one element shorter than the price series."""

    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class NormalizationParams:
    """Per-channel affine normalization, optionally preceded by a logarithm.

    A raw value `v` of channel `c` maps to `(ln(max(v, floor)) - shift[c]) / scale[c]`
    when `log_transform` is set, and to `(v - shift[c]) / scale[c]` otherwise.

    """

    shift: Tuple[float, float]
    scale: Tuple[float, float]
    log_transform: bool = True
    floor: float = FEATURE_FLOOR

    def __post_init__(self):
        if len(self.shift) != 2 or len(self.scale) != 2:
            raise ConfigError("Normalization needs one shift and scale per channel")
        if not all(s > 0 for s in self.scale):
            raise ConfigError("Normalization scales must be positive")

    @classmethod
    def identity(cls) -> "NormalizationParams":
        return cls((0.0, 0.0), (1.0, 1.0), log_transform=False)

    def apply(self, values: np.ndarray, channel: int) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.log_transform:
            values = np.log(np.maximum(values, self.floor))
        return (values - self.shift[channel]) / self.scale[channel]

    def invert(self, values: np.ndarray, channel: int) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64) * self.scale[channel]
        values = values + self.shift[channel]
        if self.log_transform:
            return np.exp(values)
        return values

    def to_dict(self) -> Dict:
        return {
            "shift": list(self.shift),
            "scale": list(self.scale),
            "log_transform": self.log_transform,
            "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "NormalizationParams":
        return cls(
            tuple(data["shift"]),
            tuple(data["scale"]),
            log_transform=data.get("log_transform", True),
            floor=data.get("floor", FEATURE_FLOOR),
        )

    def isclose(self, other: "NormalizationParams", rtol: float = 1e-12) -> bool:
        return (
            self.log_transform == other.log_transform
            and np.allclose(self.shift, other.shift, rtol=rtol, atol=0.0)
            and np.allclose(self.scale, other.scale, rtol=rtol, atol=0.0)
        )


@dataclass(frozen=True, eq=False)
class FeatureSeries:
    """Aligned hourly features `y_t = (sigma2_t, u60sq_t)`.

    Attributes
    ----------
    sigma2
        Raw historic volatility per window.
    u60sq
        Raw squared window log-return.
    norm
        Normalization applied to produce the model inputs. `None` means the
        series has not been normalized yet.

    """

    sigma2: np.ndarray
    u60sq: np.ndarray
    norm: Optional[NormalizationParams] = None

    def __post_init__(self):
        sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        u60sq = np.asarray(self.u60sq, dtype=np.float64)
        if sigma2.shape != u60sq.shape or sigma2.ndim != 1:
            raise InvalidInputError("Feature channels must be 1-d and aligned")
        if np.any(sigma2 < 0) or np.any(u60sq < 0):
            raise InvalidInputError("Volatility features must be nonnegative")
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "u60sq", u60sq)

    def __len__(self) -> int:
        return len(self.sigma2)

    def __getitem__(self, index: slice) -> "FeatureSeries":
        if not isinstance(index, slice):
            raise TypeError("FeatureSeries only supports slicing")
        return FeatureSeries(self.sigma2[index], self.u60sq[index], self.norm)

    @cached_property
    def normalized(self) -> np.ndarray:
        """The model inputs as a `(T, 2)` array."""
        if self.norm is None:
            raise InvalidInputError("The feature series has not been normalized")
        return np.column_stack(
            [self.norm.apply(self.sigma2, 0), self.norm.apply(self.u60sq, 1)]
        )

    def pairs(self) -> List[Tuple[float, float]]:
        return [(s, u) for s, u in self.normalized.tolist()]

    @staticmethod
    def concatenate(parts: Sequence["FeatureSeries"]) -> "FeatureSeries":
        return FeatureSeries(
            np.concatenate([p.sigma2 for p in parts]),
            np.concatenate([p.u60sq for p in parts]),
            parts[0].norm if parts else None,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Fractions of a chronological train/validation/test decomposition."""

    train_frac: float = 0.4
    val_frac: float = 0.4
    test_frac: float = 0.2

    def __post_init__(self):
        fractions = (self.train_frac, self.val_frac, self.test_frac)
        if not all(0 < f < 1 for f in fractions):
            raise ConfigError(f"Split fractions must lie in (0, 1), got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"Split fractions must sum to 1, got {fractions}")

    def boundaries(self, length: int) -> Tuple[int, int]:
        """End indices (exclusive) of the train and validation segments."""
        n_train = math.floor(self.train_frac * length + 1e-9)
        n_val = math.floor(self.val_frac * length + 1e-9)
        return n_train, n_train + n_val


def log_returns(prices: PriceSeries) -> ReturnSeries:
    """Compute the 1-minute log-returns `ln(S[t + 1] / S[t])`."""
    opens = prices.opens
    if len(opens) < 2:
        raise InvalidInputError("At least two prices are needed to compute returns")
    bad = np.flatnonzero(~(opens > 0))
    if bad.size:
        index = int(bad[0])
        raise InvalidInputError(
            f"Price at index {index} is not positive: {opens[index]}", index=index
        )
    return ReturnSeries(np.log(opens[1:] / opens[:-1]))


def _check_window(window: int, available: int):
    if window <= 0:
        raise InvalidInputError(f"The window must be positive, got {window}")
    if window > available:
        raise InvalidInputError(
            f"The window ({window}) exceeds the available data ({available})"
        )


def historic_volatility(returns: ReturnSeries, window: int = 60) -> np.ndarray:
    """Square root of the mean squared return over non-overlapping windows.

    Window `t` covers returns `[window * t, window * (t + 1))`; a trailing
    incomplete window is dropped.

    """
    values = np.asarray(returns.values, dtype=np.float64)
    _check_window(window, len(values))
    n_windows = len(values) // window
    blocks = values[: n_windows * window].reshape(n_windows, window)
    return np.sqrt(np.sum(blocks * blocks, axis=1) / window)


def window_log_return(prices: PriceSeries, window: int = 60) -> np.ndarray:
    """Log-return over each window: `ln(S[window * (t + 1)] / S[window * t])`."""
    opens = prices.opens
    _check_window(window, len(opens) - 1)
    n_windows = (len(opens) - 1) // window
    ends = opens[window : (n_windows + 1) * window : window]
    starts = opens[0 : n_windows * window : window]
    return np.log(ends / starts)


def build_features(prices: PriceSeries, window: int = 60) -> FeatureSeries:
    """Turn 1-minute prices into raw (volatility, squared window return) pairs."""
    sigma2 = historic_volatility(log_returns(prices), window)
    u60 = window_log_return(prices, window)
    return FeatureSeries(sigma2, u60 * u60)


def _as_slice(fit_segment: IndexRange) -> slice:
    if isinstance(fit_segment, slice):
        return fit_segment
    if isinstance(fit_segment, range):
        return slice(fit_segment.start, fit_segment.stop)
    start, stop = fit_segment
    return slice(start, stop)


def normalize(series: FeatureSeries, fit_segment: IndexRange) -> FeatureSeries:
    """Log-transform then standardize each channel with statistics of `fit_segment`.

    Features below `FEATURE_FLOOR` are clamped before the logarithm. The
    standard deviation uses the population convention (divide by n).

    """
    segment = _as_slice(fit_segment)
    shifts, scales = [], []
    for channel, name in enumerate(CHANNELS):
        values = getattr(series, name)
        n_clamped = int(np.count_nonzero(values < FEATURE_FLOOR))
        if n_clamped:
            logger.debug("Clamped %d %s values to %g", n_clamped, name, FEATURE_FLOOR)
        logs = np.log(np.maximum(values, FEATURE_FLOOR))[segment]
        if logs.size == 0:
            raise InvalidInputError("The normalization fit segment is empty")
        mean = float(np.mean(logs))
        std = float(np.std(logs))
        if not std > 0:
            raise DegenerateDataError(
                f"Channel {name} has zero variance on the fit segment"
            )
        shifts.append(mean)
        scales.append(std)

    norm = NormalizationParams(tuple(shifts), tuple(scales), log_transform=True)
    return FeatureSeries(series.sigma2, series.u60sq, norm)


def denormalize(values: Sequence[float], norm: NormalizationParams, channel: int = 0):
    """Map normalized values of `channel` back to the raw scale."""
    return norm.invert(np.asarray(values, dtype=np.float64), channel)


def split(
    series: FeatureSeries, spec: SplitSpec = SplitSpec()
) -> Tuple[FeatureSeries, FeatureSeries, FeatureSeries]:
    """Cut the series into contiguous train, validation and test segments.

    The data are never shuffled.

    """
    if len(series) < 3:
        raise InvalidInputError(
            f"At least 3 samples are needed to split, got {len(series)}"
        )
    train_end, val_end = spec.boundaries(len(series))
    return series[:train_end], series[train_end:val_end], series[val_end:]


@dataclass(frozen=True, eq=False)
class Dataset:
    """A normalized feature series with its chronological split boundaries."""

    series: FeatureSeries
    train_end: int
    val_end: int
    split_spec: SplitSpec = SplitSpec()
    window: int = 60
    name: str = "series"
    metadata: Dict = field(default_factory=dict)

    @property
    def train(self) -> FeatureSeries:
        return self.series[: self.train_end]

    @property
    def val(self) -> FeatureSeries:
        return self.series[self.train_end : self.val_end]

    @property
    def test(self) -> FeatureSeries:
        return self.series[self.val_end :]

    @property
    def norm(self) -> NormalizationParams:
        if self.series.norm is None:
            raise InvalidInputError("The dataset has not been normalized")
        return self.series.norm


def prepare_dataset(
    raw: FeatureSeries,
    split_spec: SplitSpec = SplitSpec(),
    window: int = 60,
    name: str = "series",
) -> Dataset:
    """Split the raw features and normalize them with train-only statistics."""
    split(raw, split_spec)
    train_end, val_end = split_spec.boundaries(len(raw))
    series = normalize(raw, slice(0, train_end))
    return Dataset(series, train_end, val_end, split_spec, window, name)


def find_gaps(prices: PriceSeries, max_step: int = 1) -> List[int]:
    """Indices `i` such that more than `max_step` minutes separate prices i-1 and i.

    Windows are formed by position, so gaps are reported but not filled.

    """
    steps = np.diff(prices.timestamps)
    gaps = (np.flatnonzero(steps > max_step) + 1).tolist()
    for index in gaps:
        logger.warning(
            "Gap of %d minutes before price index %d",
            int(prices.timestamps[index] - prices.timestamps[index - 1]),
            index,
        )
    return gaps


def read_prices_csv(path: Union[str, Path]) -> PriceSeries:
    """Read a `timestamp,open` CSV.

    Timestamps are either ISO-8601 strings or epoch seconds; they are stored
    as epoch minutes. Rows must be sorted by strictly increasing timestamp.

    """
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InvalidInputError(f"Cannot parse {path}: {e}") from e

    missing = {"timestamp", "open"} - set(frame.columns)
    if missing:
        raise InvalidInputError(f"{path} lacks the columns {sorted(missing)}")

    opens = pd.to_numeric(frame["open"], errors="coerce")
    if opens.isna().any():
        row = int(np.flatnonzero(opens.isna().to_numpy())[0])
        raise InvalidInputError(f"Invalid price on line {row + 2}", line=row + 2)

    stamps = frame["timestamp"]
    if pd.api.types.is_numeric_dtype(stamps):
        seconds = stamps.to_numpy(dtype=np.float64)
        minutes = np.floor(seconds / 60).astype(np.int64)
    else:
        try:
            parsed = pd.to_datetime(stamps, utc=True, format="ISO8601")
        except (ValueError, TypeError) as e:
            raise InvalidInputError(f"Invalid timestamp in {path}: {e}") from e
        nanos = parsed.dt.tz_convert(None).to_numpy(dtype="datetime64[ns]")
        minutes = np.floor_divide(nanos.astype(np.int64), 60 * 10**9)

    steps = np.diff(minutes)
    if steps.size and np.any(steps <= 0):
        row = int(np.argmax(steps <= 0)) + 1
        raise InvalidInputError(
            f"Timestamps are not strictly increasing on line {row + 2} of {path}",
            index=row,
            line=row + 2,
        )
    return PriceSeries(minutes, opens.to_numpy(dtype=np.float64))


def write_prices_csv(prices: PriceSeries, path: Union[str, Path]):
    """Write prices with epoch-second timestamps, readable by `read_prices_csv`."""
    frame = pd.DataFrame({"timestamp": prices.timestamps * 60, "open": prices.opens})
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


FEATURES_SIDECAR_SCHEMA = {
    "type": "object",
    "required": ["window", "n_rows", "norm", "split"],
    "properties": {
        "name": {"type": "string"},
        "window": {"type": "integer", "minimum": 1},
        "n_rows": {"type": "integer", "minimum": 0},
        "gaps": {"type": "integer", "minimum": 0},
        "norm": {
            "type": "object",
            "required": ["shift", "scale"],
            "properties": {
                "shift": {"type": "array", "items": {"type": "number"}},
                "scale": {"type": "array", "items": {"type": "number"}},
                "log_transform": {"type": "boolean"},
                "floor": {"type": "number"},
            },
        },
        "split": {
            "type": "object",
            "required": ["fractions", "train", "val", "test"],
            "properties": {
                "fractions": {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 3,
                    "maxItems": 3,
                },
                "train": {"type": "array", "items": {"type": "integer"}},
                "val": {"type": "array", "items": {"type": "integer"}},
                "test": {"type": "array", "items": {"type": "integer"}},
            },
        },
    },
}


def sidecar_path(features_csv: Union[str, Path]) -> Path:
    return Path(features_csv).with_suffix(".json")


def write_features(
    dataset: Dataset, path: Union[str, Path], extra: Optional[Dict] = None
) -> Tuple[Path, Path]:
    """Write the feature CSV and its JSON sidecar; returns both paths."""
    path = Path(path)
    normalized = dataset.series.normalized
    frame = pd.DataFrame(
        {
            "index": np.arange(len(dataset.series)),
            "sigma2": dataset.series.sigma2,
            "u60sq": dataset.series.u60sq,
            "sigma2_norm": normalized[:, 0],
            "u60sq_norm": normalized[:, 1],
        },
        columns=FEATURE_COLUMNS,
    )
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)

    n_rows = len(dataset.series)
    sidecar = {
        "name": dataset.name,
        "window": dataset.window,
        "n_rows": n_rows,
        "norm": dataset.norm.to_dict(),
        "split": {
            "fractions": [
                dataset.split_spec.train_frac,
                dataset.split_spec.val_frac,
                dataset.split_spec.test_frac,
            ],
            "train": [0, dataset.train_end],
            "val": [dataset.train_end, dataset.val_end],
            "test": [dataset.val_end, n_rows],
        },
    }
    sidecar.update(extra or {})
    meta_path = sidecar_path(path)
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path, meta_path


def read_features(path: Union[str, Path]) -> Dataset:
    """Load a dataset written by `write_features`."""
    path = Path(path)
    meta_path = sidecar_path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
        sidecar = json.loads(meta_path.read_text())
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
        raise InvalidInputError(f"Cannot parse the feature files {path}: {e}") from e

    try:
        jsonschema.validate(sidecar, FEATURES_SIDECAR_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"Invalid feature sidecar {meta_path}: {e.message}") from e

    missing = set(FEATURE_COLUMNS) - set(frame.columns)
    if missing:
        raise InvalidInputError(f"{path} lacks the columns {sorted(missing)}")
    if len(frame) != sidecar["n_rows"]:
        raise InvalidInputError(
            f"{path} has {len(frame)} rows, the sidecar announces {sidecar['n_rows']}"
        )

    fractions = sidecar["split"]["fractions"]
    series = FeatureSeries(
        frame["sigma2"].to_numpy(dtype=np.float64),
        frame["u60sq"].to_numpy(dtype=np.float64),
        NormalizationParams.from_dict(sidecar["norm"]),
    )
    return Dataset(
        series,
        train_end=sidecar["split"]["train"][1],
        val_end=sidecar["split"]["val"][1],
        split_spec=SplitSpec(*fractions),
        window=sidecar["window"],
        name=sidecar.get("name", path.stem),
        metadata=sidecar,
    )
