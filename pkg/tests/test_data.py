import logging
import math

import numpy as np
import pytest
from pmc_volatility.data import (
    FEATURE_FLOOR,
    FeatureSeries,
    NormalizationParams,
    PricePoint,
    PriceSeries,
    ReturnSeries,
    SplitSpec,
    build_features,
    denormalize,
    find_gaps,
    historic_volatility,
    log_returns,
    normalize,
    prepare_dataset,
    read_features,
    read_prices_csv,
    split,
    window_log_return,
    write_features,
    write_prices_csv,
)
from pmc_volatility.errors import (
    ConfigError,
    DegenerateDataError,
    InvalidInputError,
)
from pytest import approx


def test_log_returns():
    prices = PriceSeries.from_opens([1.0, math.e, math.e**3])
    assert log_returns(prices).values == approx([1.0, 2.0], abs=1e-15)


@pytest.mark.parametrize(
    "opens,expected",
    [([1.0, math.e, math.e], [1.0, 0.0]), ([5.0, 5.0, 5.0, 5.0], [0.0, 0.0, 0.0])],
)
def test_log_returns_examples(opens, expected):
    assert log_returns(PriceSeries.from_opens(opens)).values == approx(expected, abs=1e-15)


def test_log_returns_match_elementwise_ratios():
    opens = np.random.default_rng(5).uniform(10.0, 20.0, size=10)
    values = log_returns(PriceSeries.from_opens(opens)).values
    assert len(values) == 9
    for t in range(9):
        assert values[t] == approx(math.log(opens[t + 1] / opens[t]), abs=1e-15)


def test_log_returns_names_the_nonpositive_price():
    prices = PriceSeries.from_opens([1.0, 2.0, 0.0, 3.0])
    with pytest.raises(InvalidInputError) as e:
        log_returns(prices)
    assert e.value.index == 2


def test_price_point_must_be_positive():
    with pytest.raises(InvalidInputError):
        PricePoint(0, -1.0)

    points = [PricePoint(0, 1.0), PricePoint(5, 2.0)]
    assert PriceSeries.from_points(points).points() == points


def test_timestamps_strictly_increasing():
    with pytest.raises(InvalidInputError) as e:
        PriceSeries(np.array([0, 1, 1]), np.array([1.0, 1.0, 1.0]))
    assert e.value.index == 2


@pytest.mark.parametrize("n_returns,expected_rows", [(120, 2), (130, 2), (60, 1)])
def test_historic_volatility_constant_returns(n_returns, expected_rows):
    returns = ReturnSeries(np.full(n_returns, 0.01))
    sigma = historic_volatility(returns, window=60)
    assert len(sigma) == expected_rows
    assert sigma == approx([0.01] * expected_rows, rel=1e-14)


def test_historic_volatility_is_root_mean_square():
    rng = np.random.default_rng(0)
    values = rng.normal(scale=1e-3, size=180)
    sigma = historic_volatility(ReturnSeries(values), window=60)
    for t in range(3):
        block = values[60 * t : 60 * (t + 1)]
        assert sigma[t] == approx(math.sqrt(sum(v * v for v in block) / 60), rel=1e-12)


@pytest.mark.parametrize("window", [0, -3, 200])
def test_invalid_window(window):
    with pytest.raises(InvalidInputError):
        historic_volatility(ReturnSeries(np.zeros(120)), window=window)


def test_window_log_return_sums_minute_returns():
    rng = np.random.default_rng(1)
    minute_returns = rng.normal(scale=1e-3, size=125)
    opens = 50.0 * np.exp(np.concatenate([[0.0], np.cumsum(minute_returns)]))
    u = window_log_return(PriceSeries.from_opens(opens), window=60)
    assert len(u) == 2
    assert u[0] == approx(minute_returns[:60].sum(), abs=1e-12)
    assert u[1] == approx(minute_returns[60:120].sum(), abs=1e-12)


def test_window_log_return_of_doubling_prices():
    opens = 2.0 ** (np.arange(181) / 60)
    assert window_log_return(PriceSeries.from_opens(opens)) == approx(
        [math.log(2)] * 3, rel=1e-12
    )
    assert window_log_return(PriceSeries.from_opens(np.full(121, 3.0))).tolist() == [0.0, 0.0]
    assert historic_volatility(ReturnSeries(np.zeros(120))).tolist() == [0.0, 0.0]


def test_build_features_row_count():
    opens = 100.0 + np.arange(60 * 7 + 30) * 0.01
    features = build_features(PriceSeries.from_opens(opens))
    assert len(features) == 7
    assert np.all(features.sigma2 > 0)
    assert np.all(features.u60sq > 0)


def test_normalize_uses_fit_segment_only():
    rng = np.random.default_rng(2)
    raw = FeatureSeries(rng.lognormal(size=100), rng.lognormal(size=100))
    series = normalize(raw, slice(0, 40))
    train = series.normalized[:40]
    assert train.mean(axis=0) == approx([0.0, 0.0], abs=1e-12)
    assert train.std(axis=0) == approx([1.0, 1.0], rel=1e-12)

    logs = np.log(raw.sigma2[:40])
    assert series.norm.shift[0] == approx(logs.mean(), rel=1e-14)
    assert series.norm.scale[0] == approx(logs.std(), rel=1e-14)

    # the later segments do not move the statistics
    perturbed = FeatureSeries(
        np.concatenate([raw.sigma2[:40], raw.sigma2[40:] * 1000]), raw.u60sq
    )
    assert normalize(perturbed, (0, 40)).norm.isclose(series.norm)


def test_normalize_two_points_uses_population_deviation():
    values = np.array([math.e, math.e**3])
    series = normalize(FeatureSeries(values, values), slice(0, 2))
    assert series.norm.shift == approx((2.0, 2.0), rel=1e-12)
    assert series.norm.scale == approx((1.0, 1.0), rel=1e-12)
    assert series.normalized[:, 0] == approx([-1.0, 1.0], rel=1e-12)


def test_normalize_clamps_zero_features():
    sigma2 = np.array([0.0, 1e-3, 2e-3, 4e-3])
    series = normalize(FeatureSeries(sigma2, sigma2 + 1.0), range(0, 4))
    assert np.all(np.isfinite(series.normalized))
    assert series.norm.apply([0.0], 0) == approx(series.norm.apply([FEATURE_FLOOR], 0))


def test_normalize_zero_variance():
    with pytest.raises(DegenerateDataError):
        normalize(FeatureSeries(np.ones(10), np.arange(1.0, 11.0)), slice(0, 5))


def test_denormalize_inverts_normalization():
    rng = np.random.default_rng(3)
    raw = FeatureSeries(rng.lognormal(size=30), rng.lognormal(size=30))
    series = normalize(raw, slice(0, 12))
    assert denormalize(series.normalized[:, 0], series.norm) == approx(raw.sigma2, rel=1e-12)
    assert denormalize(series.normalized[:, 1], series.norm, channel=1) == approx(
        raw.u60sq, rel=1e-12
    )
    identity = NormalizationParams.identity()
    assert identity.apply([1.5, -2.0], 0) == approx([1.5, -2.0])


@pytest.mark.parametrize(
    "length,sizes",
    [(100, (40, 40, 20)), (7, (2, 2, 3)), (10, (4, 4, 2)), (5, (2, 2, 1)), (3, (1, 1, 1))],
)
def test_split_sizes(length, sizes):
    series = FeatureSeries(np.arange(1.0, length + 1), np.arange(1.0, length + 1))
    train, val, test = split(series, SplitSpec())
    assert (len(train), len(val), len(test)) == sizes
    joined = FeatureSeries.concatenate([train, val, test])
    assert np.array_equal(joined.sigma2, series.sigma2)


def test_split_too_short():
    with pytest.raises(InvalidInputError):
        split(FeatureSeries(np.ones(2), np.ones(2)))


@pytest.mark.parametrize(
    "fractions", [(0.5, 0.5, 0.1), (0.0, 0.5, 0.5), (0.4, 0.4, 0.3), (1.2, -0.1, -0.1)]
)
def test_invalid_split_spec(fractions):
    with pytest.raises(ConfigError):
        SplitSpec(*fractions)


def test_prepare_dataset_has_no_leakage():
    rng = np.random.default_rng(4)
    raw = FeatureSeries(rng.lognormal(size=50), rng.lognormal(size=50))
    dataset = prepare_dataset(raw)
    assert (dataset.train_end, dataset.val_end) == (20, 40)
    refit = normalize(raw[:20], slice(None))
    assert refit.norm.isclose(dataset.norm)
    assert len(dataset.train) + len(dataset.val) + len(dataset.test) == 50


def test_read_prices_csv_iso_and_epoch(tmp_path):
    iso = tmp_path / "iso.csv"
    iso.write_text(
        "timestamp,open\n"
        "2023-01-02T00:00:00Z,100.5\n"
        "2023-01-02T00:01:00Z,101\n"
        "2023-01-02T00:03:00Z,99.25\n"
    )
    prices = read_prices_csv(iso)
    start = 1672617600 // 60
    assert prices.timestamps.tolist() == [start, start + 1, start + 3]
    assert prices.opens.tolist() == [100.5, 101.0, 99.25]

    epoch = tmp_path / "epoch.csv"
    epoch.write_text("timestamp,open\n60,1.0\n125,2.0\n180,3.0\n")
    assert read_prices_csv(epoch).timestamps.tolist() == [1, 2, 3]


def test_read_prices_csv_unsorted(tmp_path):
    path = tmp_path / "unsorted.csv"
    path.write_text(
        "timestamp,open\n"
        "2023-01-02T00:00:00Z,100\n"
        "2023-01-02T00:02:00Z,101\n"
        "2023-01-02T00:01:00Z,102\n"
    )
    with pytest.raises(InvalidInputError) as e:
        read_prices_csv(path)
    assert e.value.line == 4
    assert "line 4" in str(e.value)


@pytest.mark.parametrize(
    "content",
    ["time,price\n1,2\n", "timestamp,open\n60,abc\n", "timestamp,open\n60,1\nnot-a-date,2\n"],
)
def test_read_prices_csv_malformed(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(InvalidInputError):
        read_prices_csv(path)


def test_prices_csv_keeps_full_precision(tmp_path):
    rng = np.random.default_rng(5)
    prices = PriceSeries.from_opens(100 * np.exp(np.cumsum(rng.normal(size=50) * 1e-3)), start=7)
    path = tmp_path / "prices.csv"
    write_prices_csv(prices, path)
    again = read_prices_csv(path)
    assert np.array_equal(again.opens, prices.opens)
    assert np.array_equal(again.timestamps, prices.timestamps)


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    opens = rng.uniform(1.0, 2.0, size=10_000) * 10.0 ** rng.integers(-3, 5, size=10_000)
    prices = PriceSeries.from_opens(opens)
    write_prices_csv(prices, tmp_path / "prices.csv")
    again = read_prices_csv(tmp_path / "prices.csv")
    assert np.array_equal(again.opens.view(np.int64), opens.view(np.int64))

    dataset = prepare_dataset(build_features(prices, window=10))
    csv_path, _ = write_features(dataset, tmp_path / "features.csv")
    loaded = read_features(csv_path).series
    assert np.array_equal(loaded.sigma2.view(np.int64), dataset.series.sigma2.view(np.int64))
    assert np.array_equal(loaded.u60sq.view(np.int64), dataset.series.u60sq.view(np.int64))


def test_find_gaps_logs_each_gap(caplog):
    prices = PriceSeries(np.array([0, 1, 2, 5, 6, 10]), np.ones(6))
    with caplog.at_level(logging.WARNING, logger="pmc_volatility.data"):
        gaps = find_gaps(prices)
    assert gaps == [3, 5]
    assert len([r for r in caplog.records if r.levelno == logging.WARNING]) == 2


def test_features_files(tmp_path):
    rng = np.random.default_rng(6)
    dataset = prepare_dataset(
        FeatureSeries(rng.lognormal(size=20), rng.lognormal(size=20)), name="toy"
    )
    csv_path, meta_path = write_features(dataset, tmp_path / "features.csv", {"gaps": 0})
    assert meta_path.name == "features.json"

    loaded = read_features(csv_path)
    assert loaded.name == "toy"
    assert (loaded.train_end, loaded.val_end) == (dataset.train_end, dataset.val_end)
    assert loaded.norm.isclose(dataset.norm, rtol=0)
    assert np.array_equal(loaded.series.sigma2, dataset.series.sigma2)
    assert np.array_equal(loaded.series.normalized, dataset.series.normalized)


@pytest.mark.parametrize("sigma2,u60sq", [([0.1, -1e-9], [0.1, 0.2]), ([0.1, 0.2], [-0.5, 0.0])])
def test_feature_series_rejects_negative_features(sigma2, u60sq):
    with pytest.raises(InvalidInputError, match="nonnegative"):
        FeatureSeries(np.array(sigma2), np.array(u60sq))


def test_features_sidecar_is_validated(tmp_path):
    rng = np.random.default_rng(7)
    dataset = prepare_dataset(FeatureSeries(rng.lognormal(size=10), rng.lognormal(size=10)))
    csv_path, meta_path = write_features(dataset, tmp_path / "features.csv")
    meta_path.write_text('{"window": 0, "n_rows": 10, "norm": {}, "split": {}}')
    with pytest.raises(ConfigError):
        read_features(csv_path)
