"""Training, model selection and multi-seed evaluation."""
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pmc_volatility.autodiff import (
    Tape,
    Value,
    backward,
    div,
    square,
    sub,
    total,
    value_of,
)
from pmc_volatility.data import Dataset, FeatureSeries, denormalize
from pmc_volatility.errors import (
    ConfigError,
    DomainError,
    InvalidInputError,
    NonFiniteError,
    NumericalDegeneracyError,
    TrainingDivergedError,
    UsageError,
)
from pmc_volatility.models.base import (
    BASE_KINDS,
    LABELS,
    ModelKind,
    Pair,
    SequenceModel,
    init_model,
)
from pmc_volatility.models.hmc import HmcModel
from pmc_volatility.models.pmc import PmcModel
from pmc_volatility.optim import AdamConfig, adam_step

logger = logging.getLogger(__name__)

DEFAULT_PATIENCE = 50
CONFIDENCE_Z = 1.96


class TrainConfig(BaseModel):
    """Optimization settings shared by every seed of an experiment."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(300, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    seed: int = Field(0, ge=0)
    patience: int = Field(DEFAULT_PATIENCE, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _default_patience(cls, data):
        if isinstance(data, dict) and data.get("patience") is None:
            data = dict(data)
            data.pop("patience", None)
            epochs = data.get("epochs", 300)
            if isinstance(epochs, int) and epochs >= 1:
                data["patience"] = min(DEFAULT_PATIENCE, epochs)
        return data

    @model_validator(mode="after")
    def _patience_within_epochs(self):
        if self.patience > self.epochs:
            raise ValueError(
                f"patience ({self.patience}) cannot exceed epochs ({self.epochs})"
            )
        return self


class ModelSpec(BaseModel):
    """Which model to build: a base forecaster, `PMC(N)-base` or `HMC(N)`."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ModelKind
    n_states: int = Field(1, ge=1)
    base: Optional[ModelKind] = None
    constants_only: bool = False

    @model_validator(mode="after")
    def _check_combination(self):
        if self.kind == ModelKind.PMC:
            if self.base not in BASE_KINDS:
                raise ValueError("A PMC needs a base forecaster: garch, fnn2, fnn3 or fnn23")
        elif self.base is not None:
            raise ValueError(f"--base only applies to pmc models, not {self.kind.value}")
        if self.kind in BASE_KINDS and self.n_states != 1:
            raise ValueError(f"{self.kind.value} has no hidden states; N must be 1")
        if self.constants_only and self.kind != ModelKind.HMC:
            raise ValueError("constants_only only applies to hmc models")
        return self

    @property
    def label(self) -> str:
        if self.kind == ModelKind.PMC:
            return f"PMC({self.n_states})-{LABELS[self.base]}"
        if self.kind == ModelKind.HMC:
            return f"HMC({self.n_states})"
        return LABELS[self.kind]

    @property
    def slug(self) -> str:
        if self.kind == ModelKind.PMC:
            return f"pmc{self.n_states}-{self.base.value}"
        if self.kind == ModelKind.HMC:
            return f"hmc{self.n_states}" + ("-const" if self.constants_only else "")
        return self.kind.value

    def build(self, seed: int) -> SequenceModel:
        if self.kind == ModelKind.PMC:
            return PmcModel.init(self.base, self.n_states, seed)
        if self.kind == ModelKind.HMC:
            return HmcModel.init(self.n_states, seed, constants_only=self.constants_only)
        return init_model(self.kind, seed)


def mse(truth: Sequence[float], pred: Sequence[float]) -> float:
    """Mean squared error."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise InvalidInputError(
            f"Cannot compare {truth.shape[0]} targets with {pred.shape[0]} predictions"
        )
    if truth.size == 0:
        raise InvalidInputError("The MSE of an empty sequence is undefined")
    return float(np.mean((truth - pred) ** 2))


def sequence_loss(predictions: Sequence[Value], targets: Sequence[float]) -> Value:
    """The MSE, recorded on the tape of the predictions."""
    if len(predictions) != len(targets):
        raise InvalidInputError("One target per prediction is needed")
    errors = [square(sub(p, t)) for p, t in zip(predictions, targets)]
    return div(total(errors), float(len(errors)))


def _pairs(features: Union[FeatureSeries, Sequence[Pair]]) -> List[Pair]:
    return features.pairs() if isinstance(features, FeatureSeries) else list(features)


def _targets(pairs: Sequence[Pair]) -> List[float]:
    return [y[0] for y in pairs[1:]]


def snapshot(model: SequenceModel) -> List[float]:
    return [p.value for p in model.parameters()]


def restore(model: SequenceModel, values: Sequence[float]):
    params = model.parameters()
    if len(params) != len(values):
        raise UsageError("The snapshot does not match the model parameters")
    for param, value in zip(params, values):
        param.value = value
        param.grad = 0.0


def validation_loss(model: SequenceModel, features: Union[FeatureSeries, Sequence[Pair]]) -> float:
    """One-step MSE with the filter started afresh at the first observation."""
    pairs = _pairs(features)
    return mse(_targets(pairs), model.filter(pairs).prediction_values())


@dataclass
class TrainResult:
    """A trained model with its loss curves.

    Attributes
    ----------
    model
        The model, holding the parameters of `best_epoch`.
    train_losses
        Training MSE of each epoch, measured before its update.
    val_losses
        Validation MSE after each epoch's update.
    best_epoch
        1-based epoch with the lowest validation MSE.

    """

    model: SequenceModel
    train_losses: List[float]
    val_losses: List[float]
    best_epoch: int

    @property
    def best_val_loss(self) -> float:
        return self.val_losses[self.best_epoch - 1]


def train(
    model: SequenceModel,
    train_features: Union[FeatureSeries, Sequence[Pair]],
    val_features: Union[FeatureSeries, Sequence[Pair]],
    config: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Fit `model` in place by full-sequence backpropagation and Adam.

    Every epoch filters the whole training split on a fresh tape, takes one
    Adam step on the one-step MSE of the normalized `sigma2`, then scores
    the validation split. The parameters of the best validation epoch are
    restored before returning.

    """
    train_pairs = _pairs(train_features)
    val_pairs = _pairs(val_features)
    if len(train_pairs) < 2:
        raise InvalidInputError("Training needs at least two observations")
    if len(val_pairs) < 2:
        raise InvalidInputError("Validation needs at least two observations")

    targets = _targets(train_pairs)
    params = model.parameters()
    adam = AdamConfig(learning_rate=config.learning_rate)

    train_losses: List[float] = []
    val_losses: List[float] = []
    best_epoch, best_val, best_values = 0, math.inf, snapshot(model)
    for epoch in range(1, config.epochs + 1):
        try:
            tape = Tape()
            loss = sequence_loss(model.filter(train_pairs, tape).predictions, targets)
            backward(tape, loss)
            adam_step(params, adam)
            val_loss = validation_loss(model, val_pairs)
        except (NonFiniteError, DomainError, NumericalDegeneracyError) as e:
            raise TrainingDivergedError(
                f"{model.label} diverged at epoch {epoch}: {e}", epoch
            ) from e
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(
                f"{model.label} has a nonfinite validation loss at epoch {epoch}", epoch
            )

        train_losses.append(value_of(loss))
        val_losses.append(val_loss)
        logger.debug(
            "%s epoch %d: train %.6g, val %.6g", model.label, epoch, train_losses[-1], val_loss
        )
        if val_loss < best_val:
            best_epoch, best_val, best_values = epoch, val_loss, snapshot(model)
        elif epoch - best_epoch >= config.patience:
            logger.info(
                "%s: no validation improvement for %d epochs, stopping at epoch %d",
                model.label,
                config.patience,
                epoch,
            )
            break

    restore(model, best_values)
    return TrainResult(model, train_losses, val_losses, best_epoch)


@dataclass
class Evaluation:
    """Test-split scores of a model filtered through the whole series."""

    mse_normalized: float
    mse_original: float
    predictions: np.ndarray


def evaluate(model: SequenceModel, dataset: Dataset) -> Evaluation:
    """Score the test split, the filter warm-started through train and validation."""
    series = dataset.series
    if dataset.val_end < 1 or dataset.val_end >= len(series):
        raise InvalidInputError("The dataset has an empty test split")
    predictions = model.filter(series.pairs()).prediction_values()
    test = predictions[dataset.val_end - 1 :]
    normalized = mse(series.normalized[dataset.val_end :, 0], test)
    original = mse(
        series.sigma2[dataset.val_end :], denormalize(test, dataset.norm, channel=0)
    )
    return Evaluation(normalized, original, predictions)


@dataclass
class SeedRun:
    seed: int
    model: SequenceModel
    train_losses: List[float]
    val_losses: List[float]
    best_epoch: int
    mse_normalized: float
    mse_original: float


def run_seed(dataset: Dataset, spec: ModelSpec, config: TrainConfig, seed: int) -> SeedRun:
    model = spec.build(seed)
    result = train(model, dataset.train, dataset.val, config)
    scores = evaluate(model, dataset)
    logger.info(
        "%s seed %d: best epoch %d, test MSE %.6g (normalized), %.6g (original)",
        spec.label,
        seed,
        result.best_epoch,
        scores.mse_normalized,
        scores.mse_original,
    )
    return SeedRun(
        seed,
        model,
        result.train_losses,
        result.val_losses,
        result.best_epoch,
        scores.mse_normalized,
        scores.mse_original,
    )


def worker_count(n_tasks: int, workers: Optional[int] = None) -> int:
    """Number of worker processes, capped by `PMC_THREADS` when set."""
    if workers is None:
        env = os.environ.get("PMC_THREADS")
        if env is not None:
            try:
                workers = int(env)
            except ValueError:
                raise ConfigError(f"PMC_THREADS must be an integer, got {env!r}")
        else:
            workers = os.cpu_count() or 1
    if workers < 1:
        raise ConfigError(f"The worker count must be positive, got {workers}")
    return max(1, min(workers, n_tasks))


def ci_half_width(values: Sequence[float]) -> Optional[float]:
    """Half-width of the Gaussian 95% confidence interval of the mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return None
    if np.all(values == values[0]):
        return 0.0
    return float(CONFIDENCE_Z * np.std(values, ddof=1) / math.sqrt(values.size))


@dataclass
class ExperimentReport:
    """Per-seed test MSEs of one model on one dataset.

    `models` and `curves` hold the trained models and their loss curves; they
    are not part of the serialized report.

    """

    label: str
    spec: Dict
    dataset: str
    seeds: List[int]
    mse_normalized: List[float]
    mse_original: List[float]
    metadata: Dict = field(default_factory=dict)
    models: List[SequenceModel] = field(default_factory=list, repr=False, compare=False)
    curves: List[Tuple[List[float], List[float]]] = field(
        default_factory=list, repr=False, compare=False
    )

    @property
    def mean_normalized(self) -> float:
        return float(np.mean(self.mse_normalized))

    @property
    def mean_original(self) -> float:
        return float(np.mean(self.mse_original))

    @property
    def ci_normalized(self) -> Optional[float]:
        return ci_half_width(self.mse_normalized)

    @property
    def ci_original(self) -> Optional[float]:
        return ci_half_width(self.mse_original)

    def to_dict(self) -> Dict:
        return {
            "label": self.label,
            "spec": self.spec,
            "dataset": self.dataset,
            "seeds": list(self.seeds),
            "normalized": {
                "per_seed": list(self.mse_normalized),
                "mean": self.mean_normalized,
                "ci95": self.ci_normalized,
            },
            "original": {
                "per_seed": list(self.mse_original),
                "mean": self.mean_original,
                "ci95": self.ci_original,
            },
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentReport":
        return cls(
            label=data["label"],
            spec=data["spec"],
            dataset=data["dataset"],
            seeds=list(data["seeds"]),
            mse_normalized=list(data["normalized"]["per_seed"]),
            mse_original=list(data["original"]["per_seed"]),
            metadata=data.get("metadata", {}),
        )

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read_json(cls, path: Union[str, Path]) -> "ExperimentReport":
        try:
            data = json.loads(Path(path).read_text())
            return cls.from_dict(data)
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise InvalidInputError(f"{path} is not an experiment report: {e}") from e

    def to_markdown(self) -> str:
        return render_comparison([self])


def run_experiment(
    dataset: Dataset,
    spec: ModelSpec,
    n_seeds: int = 5,
    config: TrainConfig = TrainConfig(),
    workers: Optional[int] = None,
) -> ExperimentReport:
    """Train and evaluate `n_seeds` independent runs, seeds `config.seed + k`."""
    if n_seeds < 1:
        raise ConfigError(f"At least one seed is needed, got {n_seeds}")
    seeds = [config.seed + k for k in range(n_seeds)]
    n_workers = worker_count(n_seeds, workers)
    logger.info(
        "Running %s on %s with seeds %s (%d workers)",
        spec.label,
        dataset.name,
        seeds,
        n_workers,
    )
    if n_workers == 1:
        runs = [run_seed(dataset, spec, config, seed) for seed in seeds]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as executor:
            futures = [
                executor.submit(run_seed, dataset, spec, config, seed) for seed in seeds
            ]
            runs = [future.result() for future in futures]

    report = ExperimentReport(
        label=spec.label,
        spec=spec.model_dump(mode="json"),
        dataset=dataset.name,
        seeds=seeds,
        mse_normalized=[run.mse_normalized for run in runs],
        mse_original=[run.mse_original for run in runs],
        metadata={
            "train": config.model_dump(mode="json"),
            "best_epochs": [run.best_epoch for run in runs],
            "protocol": {
                "window": dataset.window,
                "split": [
                    dataset.split_spec.train_frac,
                    dataset.split_spec.val_frac,
                    dataset.split_spec.test_frac,
                ],
                "n_rows": len(dataset.series),
                "optimizer": "adam",
                "learning_rate": config.learning_rate,
                "n_seeds": n_seeds,
            },
        },
        models=[run.model for run in runs],
        curves=[(run.train_losses, run.val_losses) for run in runs],
    )
    ci = report.ci_normalized
    logger.info(
        "%s: mean test MSE %.6g%s",
        spec.label,
        report.mean_normalized,
        "" if ci is None else f" +/- {ci:.3g}",
    )
    return report


def _order(report: ExperimentReport) -> Tuple[int, int, int]:
    """Rows by block: each base model then its PMC extensions, HMC last."""
    spec = ModelSpec(**report.spec)
    if spec.kind == ModelKind.HMC:
        return (len(BASE_KINDS), 1, spec.n_states)
    if spec.kind == ModelKind.PMC:
        return (BASE_KINDS.index(spec.base), 1, spec.n_states)
    return (BASE_KINDS.index(spec.kind), 0, 1)


def _cell(mean: float, ci: Optional[float]) -> str:
    return f"{mean:.4g}" if ci is None else f"{mean:.4g} ± {ci:.2g}"


def render_comparison(reports: Sequence[ExperimentReport]) -> str:
    """Markdown tables of mean test MSE, model x dataset, on both scales.

    Within each block (a base model with its PMC extensions, or the HMCs)
    the lowest mean of every column is in bold.

    """
    if not reports:
        raise InvalidInputError("No report to compare")
    datasets = sorted({r.dataset for r in reports})
    rows: Dict[str, Dict[str, ExperimentReport]] = {}
    order: Dict[str, Tuple[int, int, int]] = {}
    for report in reports:
        rows.setdefault(report.label, {})[report.dataset] = report
        order[report.label] = _order(report)
    labels = sorted(rows, key=lambda label: order[label])

    sections = []
    for scale, title in (("normalized", "Normalized scale"), ("original", "Original scale")):
        best: Dict[Tuple[int, str], float] = {}
        for label in labels:
            for name, report in rows[label].items():
                key = (order[label][0], name)
                mean = getattr(report, f"mean_{scale}")
                best[key] = min(best.get(key, math.inf), mean)

        lines = [
            f"### {title}",
            "",
            "| Model | " + " | ".join(datasets) + " |",
            "|---|" + "---|" * len(datasets),
        ]
        for label in labels:
            cells = []
            for name in datasets:
                report = rows[label].get(name)
                if report is None:
                    cells.append("")
                    continue
                mean = getattr(report, f"mean_{scale}")
                cell = _cell(mean, getattr(report, f"ci_{scale}"))
                if mean == best[(order[label][0], name)]:
                    cell = f"**{cell}**"
                cells.append(cell)
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        sections.append("\n".join(lines))
    return "\n\n".join(sections) + "\n"


__all__ = [
    "Evaluation",
    "ExperimentReport",
    "ModelSpec",
    "SeedRun",
    "TrainConfig",
    "TrainResult",
    "ci_half_width",
    "evaluate",
    "mse",
    "render_comparison",
    "run_experiment",
    "sequence_loss",
    "train",
    "validation_loss",
    "worker_count",
]
