"""The `pmc-volatility` command line.

Exit codes: 0 on success, 2 for invalid input or configuration, 1 for
internal errors.

"""
import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from pmc_volatility import __version__
from pmc_volatility.data import (
    FLOAT_FORMAT,
    SplitSpec,
    build_features,
    denormalize,
    find_gaps,
    prepare_dataset,
    read_features,
    read_prices_csv,
    write_features,
)
from pmc_volatility.errors import (
    ConfigError,
    DegenerateDataError,
    DegenerateEvidenceError,
    InvalidInputError,
)
from pmc_volatility.markov import permutation_agreement
from pmc_volatility.models.base import BASE_KINDS, ModelKind
from pmc_volatility.models.serialization import MODEL_SCHEMA, read_model, write_model
from pmc_volatility.synth import (
    DEFAULT_BENCHMARK_HOURS,
    RegimeSpec,
    default_benchmark_spec,
    generate,
    read_regimes_csv,
    write_synthetic,
)
from pmc_volatility.training import (
    ExperimentReport,
    ModelSpec,
    TrainConfig,
    render_comparison,
    run_experiment,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
MANIFEST_NAME = "manifest.json"

USER_ERRORS = (
    InvalidInputError,
    DegenerateDataError,
    ConfigError,
    DegenerateEvidenceError,
    ValidationError,
    FileNotFoundError,
    IsADirectoryError,
    NotADirectoryError,
)

PathLike = Union[str, Path]


def file_digest(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _canonical(data: Dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


@dataclass
class RunManifest:
    """What a command read, how it was configured and what it wrote.

    Holds no timestamps, so identical runs produce identical manifests.

    """

    command: str
    config: Dict
    inputs: Dict[str, str] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)
    protocol: Dict = field(default_factory=dict)
    version: str = __version__

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.config).encode()).hexdigest()

    def add_input(self, path: PathLike):
        self.inputs[str(path)] = file_digest(path)

    def add_artifact(self, path: Path, root: Path):
        self.artifacts[str(path.relative_to(root))] = file_digest(path)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["config_hash"] = self.config_hash
        return data

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _out_dir(path: PathLike) -> Path:
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _command_config(args: argparse.Namespace) -> Dict:
    return {
        key: (str(value) if isinstance(value, Path) else value)
        for key, value in sorted(vars(args).items())
        if key not in ("func", "verbose", "log_level")
    }


def cmd_features(args: argparse.Namespace) -> RunManifest:
    """Turn a 1-minute price CSV into normalized hourly features."""
    prices = read_prices_csv(args.prices)
    gaps = find_gaps(prices)
    if gaps:
        logger.warning("%s contains %d timestamp gaps", args.prices, len(gaps))
    raw = build_features(prices, args.window)
    dataset = prepare_dataset(
        raw,
        SplitSpec(*args.split),
        window=args.window,
        name=args.name or Path(args.prices).stem,
    )

    out_dir = _out_dir(args.out_dir)
    csv_path, meta_path = write_features(
        dataset, out_dir / "features.csv", extra={"gaps": len(gaps)}
    )
    logger.info(
        "Wrote %d feature rows (train %d, val %d, test %d) to %s",
        len(dataset.series),
        len(dataset.train),
        len(dataset.val),
        len(dataset.test),
        csv_path,
    )

    manifest = RunManifest(
        "features",
        _command_config(args),
        protocol={"window": args.window, "split": list(args.split)},
    )
    manifest.add_input(args.prices)
    for path in (csv_path, meta_path):
        manifest.add_artifact(path, out_dir)
    manifest.write(out_dir)
    return manifest


def cmd_synth(args: argparse.Namespace) -> RunManifest:
    """Simulate regime-switching prices, with their true regimes."""
    if args.spec is None:
        spec = default_benchmark_spec()
    else:
        spec = RegimeSpec.model_validate_json(Path(args.spec).read_text())
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})

    series = generate(spec, args.hours, args.minutes_per_hour)
    out_dir = _out_dir(args.out_dir)
    prices_path, regimes_path = write_synthetic(series, out_dir)
    spec_path = out_dir / "spec.json"
    spec_path.write_text(spec.model_dump_json(indent=2) + "\n")
    logger.info(
        "Simulated %d hours over %d regimes into %s",
        args.hours,
        spec.n_regimes,
        out_dir,
    )

    manifest = RunManifest("synth", _command_config(args), seeds=[spec.seed])
    if args.spec is not None:
        manifest.add_input(args.spec)
    for path in (prices_path, regimes_path, spec_path):
        manifest.add_artifact(path, out_dir)
    manifest.write(out_dir)
    return manifest


def load_train_config(args: argparse.Namespace) -> TrainConfig:
    """Settings from `--config`, overridden by explicit flags."""
    data = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config} must hold a JSON object")
    for key in ("epochs", "learning_rate", "seed", "patience"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    return TrainConfig(**data)


def model_specs(args: argparse.Namespace) -> List[ModelSpec]:
    kind = ModelKind(args.model)
    sizes = args.N or ([2] if kind in (ModelKind.PMC, ModelKind.HMC) else [1])
    return [
        ModelSpec(
            kind=kind,
            n_states=n,
            base=args.base,
            constants_only=args.constants_only,
        )
        for n in sizes
    ]


def _write_curves(report: ExperimentReport, path: Path):
    rows = [
        (seed, epoch + 1, train, val)
        for seed, (train_losses, val_losses) in zip(report.seeds, report.curves)
        for epoch, (train, val) in enumerate(zip(train_losses, val_losses))
    ]
    frame = pd.DataFrame(rows, columns=["seed", "epoch", "train_mse", "val_mse"])
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def cmd_train(args: argparse.Namespace) -> RunManifest:
    """Train and evaluate one or several models over several seeds."""
    config = load_train_config(args)
    specs = model_specs(args)
    dataset = read_features(args.features)
    out_dir = _out_dir(args.out_dir)

    manifest = RunManifest(
        "train",
        {**_command_config(args), "train": config.model_dump(mode="json")},
        seeds=[config.seed + k for k in range(args.seeds)],
        protocol={
            "window": dataset.window,
            "split": [
                dataset.split_spec.train_frac,
                dataset.split_spec.val_frac,
                dataset.split_spec.test_frac,
            ],
            "optimizer": "adam",
            "learning_rate": config.learning_rate,
            "n_seeds": args.seeds,
        },
    )
    manifest.add_input(args.features)

    for spec in specs:
        report = run_experiment(dataset, spec, args.seeds, config, workers=args.workers)
        written = [
            write_model(model, out_dir / f"{spec.slug}_seed{seed}.json", dataset.norm)
            for seed, model in zip(report.seeds, report.models)
        ]
        written.append(report.write_json(out_dir / f"report_{spec.slug}.json"))
        markdown = out_dir / f"report_{spec.slug}.md"
        markdown.write_text(report.to_markdown())
        written.append(markdown)
        curves = out_dir / f"curves_{spec.slug}.csv"
        _write_curves(report, curves)
        written.append(curves)
        for path in written:
            manifest.add_artifact(path, out_dir)

    manifest.write(out_dir)
    return manifest


def state_summary(model, posteriors: np.ndarray, forecasts: np.ndarray) -> List[Dict]:
    """Per hidden state: its parameters, how often it dominates, and the
    mean forecast while it does.

    `forecasts[t]` is the original-scale forecast made at step `t`.

    """
    dominant = posteriors.argmax(axis=1)
    if hasattr(model, "describe_states"):
        params = model.describe_states()
    else:
        params = [model.describe()]
    summary = []
    for state in range(posteriors.shape[1]):
        mask = dominant[: len(forecasts)] == state
        summary.append(
            {
                "state": state,
                "params": params[state],
                "dominant_fraction": float(np.mean(dominant == state)),
                "mean_forecast": float(np.mean(forecasts[mask])) if mask.any() else None,
            }
        )
    return summary


def cmd_report(args: argparse.Namespace) -> RunManifest:
    """Export the posterior trajectory and forecasts of a trained model."""
    model, norm = read_model(args.model)
    dataset = read_features(args.features)
    if norm is not None and not norm.isclose(dataset.norm):
        raise ConfigError(
            f"{args.model} was trained on features normalized differently from {args.features}"
        )

    result = model.filter(dataset.series.pairs())
    forecasts = denormalize(result.prediction_values(), dataset.norm, channel=0)
    posteriors = result.posterior_values()
    dominant = posteriors.argmax(axis=1)

    columns = {"t": np.arange(len(posteriors)), "pred": np.append(forecasts, np.nan)}
    for state in range(posteriors.shape[1]):
        columns[f"state{state}"] = posteriors[:, state]
    columns["argmax"] = dominant

    out_dir = _out_dir(args.out_dir)
    trajectories = out_dir / "trajectories.csv"
    pd.DataFrame(columns).to_csv(trajectories, index=False, float_format=FLOAT_FORMAT)

    states: Dict = {
        "label": model.label,
        "states": state_summary(model, posteriors, forecasts),
    }
    manifest = RunManifest("report", _command_config(args))
    manifest.add_input(args.model)
    manifest.add_input(args.features)
    if args.regimes is not None:
        truth = read_regimes_csv(args.regimes)
        n = min(len(truth), len(dominant))
        agreement, mapping = permutation_agreement(
            dominant[:n], truth[:n], n_states=posteriors.shape[1]
        )
        states["regime_agreement"] = {
            "agreement": agreement,
            "mapping": list(mapping),
            "hours": n,
        }
        logger.info("Dominant states agree with the regimes %.1f%% of the time", 100 * agreement)
        manifest.add_input(args.regimes)

    states_path = out_dir / "states.json"
    states_path.write_text(json.dumps(states, indent=2, sort_keys=True) + "\n")
    for path in (trajectories, states_path):
        manifest.add_artifact(path, out_dir)
    manifest.write(out_dir)
    return manifest


def cmd_compare(args: argparse.Namespace) -> None:
    """Tabulate experiment reports, model x dataset."""
    table = render_comparison([ExperimentReport.read_json(path) for path in args.reports])
    if args.out is None:
        sys.stdout.write(table)
    else:
        Path(args.out).write_text(table)


SCHEMAS: Dict[str, Callable[[], Dict]] = {
    "train": TrainConfig.model_json_schema,
    "spec": ModelSpec.model_json_schema,
    "model": lambda: MODEL_SCHEMA,
    "regime": RegimeSpec.model_json_schema,
}


def cmd_schema(args: argparse.Namespace) -> None:
    """Print the JSON schema of a configuration or model file."""
    sys.stdout.write(json.dumps(SCHEMAS[args.which](), indent=2) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmc-volatility",
        description="Regime-aware volatility forecasting with pairwise Markov chains.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="same as --log-level DEBUG")
    subparsers = parser.add_subparsers(dest="command", required=True)

    features = subparsers.add_parser("features", help=cmd_features.__doc__)
    features.add_argument("prices", type=Path, help="CSV with timestamp,open columns")
    features.add_argument("out_dir", type=Path)
    features.add_argument("--window", type=int, default=60, help="minutes per feature row")
    features.add_argument(
        "--split",
        type=float,
        nargs=3,
        default=[0.4, 0.4, 0.2],
        metavar=("TRAIN", "VAL", "TEST"),
    )
    features.add_argument("--name", help="dataset name used in reports")
    features.set_defaults(func=cmd_features)

    synth = subparsers.add_parser("synth", help=cmd_synth.__doc__)
    synth.add_argument(
        "spec", type=Path, nargs="?", help="RegimeSpec JSON; the default benchmark if omitted"
    )
    synth.add_argument("out_dir", type=Path)
    synth.add_argument("--hours", type=int, default=DEFAULT_BENCHMARK_HOURS)
    synth.add_argument("--minutes-per-hour", type=int, default=60)
    synth.add_argument("--seed", type=int, help="overrides the seed in the regime file")
    synth.set_defaults(func=cmd_synth)

    train = subparsers.add_parser("train", help=cmd_train.__doc__)
    train.add_argument("features", type=Path, help="features.csv written by `features`")
    train.add_argument("out_dir", type=Path)
    train.add_argument("--model", required=True, choices=[k.value for k in ModelKind])
    train.add_argument("--N", type=int, nargs="+", help="number of hidden states")
    train.add_argument("--base", choices=[k.value for k in BASE_KINDS])
    train.add_argument("--constants-only", action="store_true", help="HMC heads ignore y_t")
    train.add_argument("--seeds", type=int, default=5)
    train.add_argument("--config", type=Path, help="JSON TrainConfig; flags override it")
    train.add_argument("--epochs", type=int)
    train.add_argument("--learning-rate", type=float)
    train.add_argument("--patience", type=int)
    train.add_argument("--seed", type=int, help="first seed")
    train.add_argument("--workers", type=int, help="worker processes (default: PMC_THREADS)")
    train.set_defaults(func=cmd_train)

    report = subparsers.add_parser("report", help=cmd_report.__doc__)
    report.add_argument("model", type=Path)
    report.add_argument("features", type=Path)
    report.add_argument("out_dir", type=Path)
    report.add_argument("--regimes", type=Path, help="true regimes CSV to score against")
    report.set_defaults(func=cmd_report)

    compare = subparsers.add_parser("compare", help=cmd_compare.__doc__)
    compare.add_argument("reports", type=Path, nargs="+")
    compare.add_argument("--out", type=Path)
    compare.set_defaults(func=cmd_compare)

    schema = subparsers.add_parser("schema", help=cmd_schema.__doc__)
    schema.add_argument("which", choices=sorted(SCHEMAS))
    schema.set_defaults(func=cmd_schema)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, args.log_level),
        format=LOG_FORMAT,
    )
    try:
        args.func(args)
    except USER_ERRORS as e:
        logger.error("%s", e)
        return 2
    except Exception:
        logger.exception("pmc-volatility %s failed", args.command)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
