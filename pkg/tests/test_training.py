import math

import numpy as np
import pytest
from pmc_volatility.autodiff import Tape, backward
from pmc_volatility.data import FeatureSeries, NormalizationParams
from pmc_volatility.errors import (
    ConfigError,
    InvalidInputError,
    TrainingDivergedError,
)
from pmc_volatility.models.base import GarchModel, GarchParams, init_model
from pmc_volatility.models.pmc import PmcModel
from pmc_volatility.optim import AdamConfig, adam_step
from pmc_volatility.training import (
    ExperimentReport,
    ModelSpec,
    TrainConfig,
    ci_half_width,
    evaluate,
    mse,
    render_comparison,
    run_experiment,
    sequence_loss,
    train,
    validation_loss,
    worker_count,
)
from pydantic import ValidationError
from pytest import approx


def test_mse_examples():
    assert mse([0.3, -1.0, 2.5], [0.3, -1.0, 2.5]) == 0.0
    assert mse([0.0, 0.0], [1.0, 1.0]) == 1.0

    rng = np.random.default_rng(0)
    truth, pred = rng.normal(size=(2, 100))
    squares = [(t - p) ** 2 for t, p in zip(truth.tolist(), pred.tolist())]
    assert mse(truth, pred) == approx(math.fsum(squares) / 100, abs=1e-14)

    with pytest.raises(InvalidInputError):
        mse([1.0], [1.0, 2.0])
    with pytest.raises(InvalidInputError):
        mse([], [])


def test_sequence_loss_matches_mse():
    rng = np.random.default_rng(1)
    pred, truth = rng.normal(size=(2, 30)).tolist()
    assert sequence_loss(pred, truth) == approx(mse(truth, pred), rel=1e-14)


def test_train_config_defaults_and_validation():
    config = TrainConfig()
    assert (config.epochs, config.learning_rate, config.patience) == (300, 0.05, 50)
    assert TrainConfig(epochs=10).patience == 10
    assert TrainConfig(epochs=10, patience=None).patience == 10

    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(epochs=10, patience=11)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="sgd")


@pytest.mark.parametrize(
    "fields,slug,label",
    [
        ({"kind": "garch"}, "garch", "GARCH(1, 1)"),
        ({"kind": "fnn23"}, "fnn23", "FNN(2, 3)"),
        ({"kind": "pmc", "n_states": 2, "base": "garch"}, "pmc2-garch", "PMC(2)-GARCH(1, 1)"),
        ({"kind": "hmc", "n_states": 3}, "hmc3", "HMC(3)"),
        ({"kind": "hmc", "n_states": 2, "constants_only": True}, "hmc2-const", "HMC(2)"),
    ],
)
def test_model_spec_names(fields, slug, label):
    spec = ModelSpec(**fields)
    assert spec.slug == slug
    assert spec.label == label
    assert spec.build(0).label == label


@pytest.mark.parametrize(
    "fields",
    [
        {"kind": "pmc", "n_states": 2},
        {"kind": "pmc", "n_states": 2, "base": "hmc"},
        {"kind": "garch", "base": "garch"},
        {"kind": "garch", "n_states": 2},
        {"kind": "pmc", "n_states": 0, "base": "garch"},
        {"kind": "fnn2", "constants_only": True},
        {"kind": "lstm"},
    ],
)
def test_model_spec_rejects_invalid_combinations(fields):
    with pytest.raises(ValidationError):
        ModelSpec(**fields)


def test_one_epoch_returns_the_updated_parameters(small_dataset):
    model = init_model("garch", 0)
    reference = init_model("garch", 0)
    pairs = small_dataset.train.pairs()
    tape = Tape()
    loss = sequence_loss(
        reference.filter(pairs, tape).predictions, [y[0] for y in pairs[1:]]
    )
    backward(tape, loss)
    adam_step(reference.parameters(), AdamConfig(learning_rate=0.05))

    result = train(model, small_dataset.train, small_dataset.val, TrainConfig(epochs=1))
    assert result.best_epoch == 1
    assert len(result.train_losses) == len(result.val_losses) == 1
    assert [p.value for p in model.parameters()] == [
        p.value for p in reference.parameters()
    ]


def test_single_state_pmc_trains_like_its_base(small_dataset):
    config = TrainConfig(epochs=15)
    garch = train(init_model("garch", 4), small_dataset.train, small_dataset.val, config)
    pmc = train(PmcModel.init("garch", 1, 4), small_dataset.train, small_dataset.val, config)
    assert pmc.train_losses == approx(garch.train_losses, abs=1e-12)
    assert pmc.val_losses == approx(garch.val_losses, abs=1e-12)
    assert pmc.best_epoch == garch.best_epoch


def test_best_validation_epoch_is_restored(small_dataset):
    model = PmcModel.init("garch", 2, 1)
    result = train(model, small_dataset.train, small_dataset.val, TrainConfig(epochs=25))
    assert result.best_val_loss == min(result.val_losses)
    assert result.val_losses.index(result.best_val_loss) == result.best_epoch - 1
    assert validation_loss(model, small_dataset.val) == result.best_val_loss


def test_patience_bounds_epochs_after_the_best(small_dataset):
    model = GarchModel(GarchParams.from_values(0.0, 0.0, 0.0))
    config = TrainConfig(epochs=40, patience=3, learning_rate=50.0)
    result = train(model, small_dataset.train, small_dataset.val, config)
    assert len(result.val_losses) <= 40
    assert len(result.val_losses) - result.best_epoch <= 3


def test_garch_recovers_known_parameters():
    omega, alpha, beta = 0.1, 0.3, 0.5
    rng = np.random.default_rng(7)
    u2 = rng.exponential(1.0, size=180)
    sigma2 = np.empty(180)
    sigma2[0] = omega / (1 - alpha - beta)
    for t in range(179):
        sigma2[t + 1] = omega + alpha * u2[t] + beta * sigma2[t]
    series = FeatureSeries(sigma2, u2, NormalizationParams.identity())

    model = init_model("garch", 0)
    config = TrainConfig(epochs=2000, learning_rate=0.01, patience=2000)
    train(model, series[:120], series[120:], config)
    assert model.params.values() == approx((omega, alpha, beta), abs=0.05)


def test_divergence_is_reported():
    model = GarchModel(GarchParams.from_values(0.0, 0.0, 1e300))
    pairs = [(10.0, 1.0), (20.0, 1.0), (30.0, 1.0)]
    with pytest.raises(TrainingDivergedError) as e:
        train(model, pairs, pairs, TrainConfig(epochs=5))
    assert e.value.epoch == 1


def test_train_needs_two_observations():
    with pytest.raises(InvalidInputError):
        train(init_model("garch", 0), [(0.0, 0.0)], [(0.0, 0.0), (1.0, 1.0)])


def test_evaluation_scales(small_dataset):
    model = init_model("fnn2", 3)
    scores = evaluate(model, small_dataset)
    series = small_dataset.series
    assert len(scores.predictions) == len(series) - 1

    test_pred = scores.predictions[small_dataset.val_end - 1 :]
    assert len(test_pred) == len(small_dataset.test)
    assert scores.mse_normalized == approx(
        mse(small_dataset.test.normalized[:, 0], test_pred), rel=1e-14
    )

    shift, scale = small_dataset.norm.shift[0], small_dataset.norm.scale[0]
    raw_pred = np.exp(test_pred * scale + shift)
    expected = float(np.mean((small_dataset.test.sigma2 - raw_pred) ** 2))
    assert scores.mse_original == approx(expected, rel=1e-10, abs=1e-30)


def test_confidence_interval():
    assert ci_half_width([0.4]) is None
    assert ci_half_width([0.2, 0.2, 0.2]) == 0.0
    assert ci_half_width([1.0, 2.0, 3.0]) == approx(1.96 / math.sqrt(3), rel=1e-14)


@pytest.mark.parametrize("value", [0.2, 0.1, 1 / 3, 0.0937, 7e-5])
@pytest.mark.parametrize("n_seeds", [2, 3, 5])
def test_equal_seed_errors_have_no_spread(value, n_seeds):
    assert ci_half_width([value] * n_seeds) == 0.0


def test_worker_count(monkeypatch):
    monkeypatch.setenv("PMC_THREADS", "3")
    assert worker_count(5) == 3
    assert worker_count(2) == 2
    assert worker_count(5, workers=4) == 4

    monkeypatch.setenv("PMC_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count(5)
    monkeypatch.setenv("PMC_THREADS", "0")
    with pytest.raises(ConfigError):
        worker_count(5)

    monkeypatch.delenv("PMC_THREADS")
    assert worker_count(1) == 1


def test_run_experiment_is_deterministic(small_dataset, tmp_path):
    spec = ModelSpec(kind="pmc", n_states=2, base="garch")
    config = TrainConfig(epochs=4, seed=10)
    first = run_experiment(small_dataset, spec, n_seeds=2, config=config, workers=1)
    second = run_experiment(small_dataset, spec, n_seeds=2, config=config, workers=1)
    assert first.seeds == [10, 11]
    assert first.to_dict() == second.to_dict()
    assert len(first.models) == len(first.curves) == 2

    protocol = first.metadata["protocol"]
    assert protocol["window"] == 60
    assert protocol["split"] == [0.4, 0.4, 0.2]
    assert protocol["n_seeds"] == 2

    path = first.write_json(tmp_path / "report.json")
    again = ExperimentReport.read_json(path)
    assert again.to_dict() == first.to_dict()
    for scale in ("normalized", "original"):
        values = getattr(first, f"mse_{scale}")
        assert min(values) <= getattr(first, f"mean_{scale}") <= max(values)


def test_run_experiment_in_worker_processes(small_dataset):
    spec = ModelSpec(kind="garch")
    config = TrainConfig(epochs=3)
    serial = run_experiment(small_dataset, spec, n_seeds=2, config=config, workers=1)
    parallel = run_experiment(small_dataset, spec, n_seeds=2, config=config, workers=2)
    assert parallel.to_dict() == serial.to_dict()


def test_single_seed_report_has_no_interval(small_dataset):
    report = run_experiment(
        small_dataset, ModelSpec(kind="garch"), n_seeds=1, config=TrainConfig(epochs=2)
    )
    assert report.ci_normalized is None
    assert report.to_dict()["original"]["ci95"] is None
    with pytest.raises(ConfigError):
        run_experiment(small_dataset, ModelSpec(kind="garch"), n_seeds=0)


def test_read_json_rejects_other_files(tmp_path):
    path = tmp_path / "report.json"
    path.write_text('{"label": "x"}')
    with pytest.raises(InvalidInputError):
        ExperimentReport.read_json(path)


def make_report(fields, dataset, values):
    spec = ModelSpec(**fields)
    return ExperimentReport(
        label=spec.label,
        spec=spec.model_dump(mode="json"),
        dataset=dataset,
        seeds=list(range(len(values))),
        mse_normalized=list(values),
        mse_original=[10 * v for v in values],
    )


def test_render_comparison_orders_blocks_and_marks_the_best():
    reports = [
        make_report({"kind": "hmc", "n_states": 2}, "bench", [3.0, 3.2]),
        make_report({"kind": "fnn2"}, "bench", [0.5, 0.7]),
        make_report({"kind": "pmc", "n_states": 2, "base": "garch"}, "bench", [1.0, 1.2]),
        make_report({"kind": "garch"}, "bench", [2.0, 2.2]),
        make_report({"kind": "garch"}, "other", [4.0]),
    ]
    table = render_comparison(reports)
    normalized, original = table.split("### Original scale")
    assert normalized.startswith("### Normalized scale")

    rows = [line for line in normalized.splitlines() if line.startswith("| ") and "Model" not in line]
    assert [row.split(" | ")[0] for row in rows] == [
        "| GARCH(1, 1)",
        "| PMC(2)-GARCH(1, 1)",
        "| FNN(2)",
        "| HMC(2)",
    ]
    assert "| bench | other |" in normalized
    assert rows[0].startswith("| GARCH(1, 1) | 2.1 ± ")
    assert "**4** |" in rows[0]
    assert "**1.1 ± " in rows[1]
    assert "**0.6 ± " in rows[2]
    assert "**3.1 ± " in rows[3]
    assert "| GARCH(1, 1) | 21 ± 2 | **40** |" in original
    assert "| PMC(2)-GARCH(1, 1) | **11 ± 2** |  |" in original


def test_render_comparison_needs_reports():
    with pytest.raises(InvalidInputError):
        render_comparison([])


@pytest.mark.slow
def test_pmc_fits_state_switching_driven_by_observations():
    """Regimes switch on the size of the previous return, which only the
    PMC weight sees."""
    rng = np.random.default_rng(11)
    length = 400
    u2 = rng.exponential(1.0, size=length)
    sigma2 = np.empty(length)
    sigma2[0] = 1.0
    regime = 0
    for t in range(length - 1):
        if t > 0:
            regime = int(u2[t - 1] > 1.5)
        level = (0.2, 2.0)[regime]
        sigma2[t + 1] = level + 0.3 * sigma2[t] * (1 - regime)
    series = FeatureSeries(sigma2, u2, NormalizationParams.identity())
    train_part, val_part = series[:300], series[300:]

    config = TrainConfig(epochs=150, patience=150)
    pmc_losses, hmc_losses = [], []
    for seed in range(3):
        pmc = train(PmcModel.init("garch", 2, seed), train_part, val_part, config)
        hmc = train(ModelSpec(kind="hmc", n_states=2).build(seed), train_part, val_part, config)
        pmc_losses.append(min(pmc.train_losses))
        hmc_losses.append(min(hmc.train_losses))
    assert np.mean(pmc_losses) <= np.mean(hmc_losses)
