"""Base forecasters `f(sigma2_t, u2_t) -> sigma2_{t+1}`."""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np

from pmc_volatility.autodiff import Param, Tape, Value, linear, tanh
from pmc_volatility.errors import ConfigError, InvalidInputError
from pmc_volatility.models.filtering import FilterResult
from pmc_volatility.models.networks import DenseLayer

Pair = Tuple[Value, Value]


class ModelKind(str, Enum):
    """Model families, keyed by their CLI names."""

    GARCH = "garch"
    FNN2 = "fnn2"
    FNN3 = "fnn3"
    FNN23 = "fnn23"
    HMC = "hmc"
    PMC = "pmc"


BASE_KINDS = (ModelKind.GARCH, ModelKind.FNN2, ModelKind.FNN3, ModelKind.FNN23)

FNN_HIDDEN_LAYERS = {
    ModelKind.FNN2: (2,),
    ModelKind.FNN3: (3,),
    ModelKind.FNN23: (2, 3),
}

LABELS = {
    ModelKind.GARCH: "GARCH(1, 1)",
    ModelKind.FNN2: "FNN(2)",
    ModelKind.FNN3: "FNN(3)",
    ModelKind.FNN23: "FNN(2, 3)",
}


@runtime_checkable
class SequenceModel(Protocol):
    """A one-step-ahead volatility forecaster over feature sequences."""

    kind: ModelKind

    @property
    def n_states(self) -> int:
        ...

    @property
    def label(self) -> str:
        ...

    def parameters(self) -> List[Param]:
        ...

    def filter(self, pairs: Sequence[Pair], tape: Optional[Tape] = None) -> FilterResult:
        ...

    def to_dict(self) -> Dict:
        ...


@runtime_checkable
class Forecaster(SequenceModel, Protocol):
    """A pointwise forecaster, usable as an expert of a regime mixture."""

    def forecast(self, sigma2: Value, u2: Value, tape: Optional[Tape] = None) -> Value:
        ...

    def predict(self, y: Pair, tape: Optional[Tape] = None) -> Value:
        ...

    def describe(self) -> Dict:
        ...


@dataclass(eq=False)
class GarchParams:
    omega: Param
    alpha: Param
    beta: Param

    @classmethod
    def from_values(cls, omega: float, alpha: float, beta: float) -> "GarchParams":
        return cls(
            Param(float(omega), name="omega"),
            Param(float(alpha), name="alpha"),
            Param(float(beta), name="beta"),
        )

    def values(self) -> Tuple[float, float, float]:
        return (self.omega.value, self.alpha.value, self.beta.value)


def garch_forecast(
    p: GarchParams, sigma2: Value, u2: Value, tape: Optional[Tape] = None
) -> Value:
    """`omega + alpha * u2 + beta * sigma2`. No sign or stationarity constraint."""
    return linear([p.alpha.on(tape), p.beta.on(tape)], [u2, sigma2], p.omega.on(tape))


@dataclass(eq=False)
class FnnParams:
    """Dense layers from the 2 inputs to the scalar output."""

    layers: List[DenseLayer]
    kind: ModelKind

    def __post_init__(self):
        if self.kind not in FNN_HIDDEN_LAYERS:
            raise ConfigError(f"{self.kind} is not a feedforward architecture")
        expected = (2, *FNN_HIDDEN_LAYERS[self.kind], 1)
        shapes = [(layer.in_dim, layer.out_dim) for layer in self.layers]
        if shapes != list(zip(expected[:-1], expected[1:])):
            raise ConfigError(
                f"Layer shapes {shapes} do not match the {self.kind.value} architecture"
            )


def fnn_forward(p: FnnParams, inputs: Pair, tape: Optional[Tape] = None) -> Value:
    """Affine layers with tanh activations in between; no output activation."""
    x: List[Value] = list(inputs)
    for layer in p.layers[:-1]:
        x = [tanh(v) for v in layer(x, tape)]
    return p.layers[-1](x, tape)[0]


class _PointwiseModel:
    """Sequence behaviour shared by the base forecasters."""

    kind: ModelKind
    n_states = 1
    seed: Optional[int] = None

    @property
    def label(self) -> str:
        return LABELS[self.kind]

    def forecast(self, sigma2: Value, u2: Value, tape: Optional[Tape] = None) -> Value:
        raise NotImplementedError

    def predict(self, y: Pair, tape: Optional[Tape] = None) -> Value:
        return self.forecast(y[0], y[1], tape)

    def filter(self, pairs: Sequence[Pair], tape: Optional[Tape] = None) -> FilterResult:
        if len(pairs) < 2:
            raise InvalidInputError("Forecasting needs at least two observations")
        return FilterResult([self.predict(y, tape) for y in pairs[:-1]])


class GarchModel(_PointwiseModel):
    kind = ModelKind.GARCH

    def __init__(self, params: GarchParams, seed: Optional[int] = None):
        self.params = params
        self.seed = seed

    def parameters(self) -> List[Param]:
        return [self.params.omega, self.params.alpha, self.params.beta]

    def forecast(self, sigma2: Value, u2: Value, tape: Optional[Tape] = None) -> Value:
        return garch_forecast(self.params, sigma2, u2, tape)

    def describe(self) -> Dict:
        omega, alpha, beta = self.params.values()
        return {"omega": omega, "alpha": alpha, "beta": beta}

    def to_dict(self) -> Dict:
        return {"kind": self.kind.value, "params": self.describe(), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Dict) -> "GarchModel":
        params = data["params"]
        return cls(
            GarchParams.from_values(params["omega"], params["alpha"], params["beta"]),
            seed=data.get("seed"),
        )


class FnnModel(_PointwiseModel):
    def __init__(self, params: FnnParams, seed: Optional[int] = None):
        self.params = params
        self.kind = params.kind
        self.seed = seed

    def parameters(self) -> List[Param]:
        return [p for layer in self.params.layers for p in layer.parameters()]

    def forecast(self, sigma2: Value, u2: Value, tape: Optional[Tape] = None) -> Value:
        return fnn_forward(self.params, (sigma2, u2), tape)

    def describe(self) -> Dict:
        return {"layers": [layer.to_dict() for layer in self.params.layers]}

    def to_dict(self) -> Dict:
        return {"kind": self.kind.value, "params": self.describe(), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Dict) -> "FnnModel":
        kind = ModelKind(data["kind"])
        layers = [
            DenseLayer.from_dict(layer, name=f"layer{i}")
            for i, layer in enumerate(data["params"]["layers"])
        ]
        return cls(FnnParams(layers, kind), seed=data.get("seed"))


BaseModel = Union[GarchModel, FnnModel]


def init_model(kind: Union[ModelKind, str], rng_seed: int) -> BaseModel:
    """Draw the initial parameters of a base forecaster, deterministically per seed.

    GARCH: `omega` and `alpha` uniform on (-0.1, 0.1), `beta` uniform on
    (0.3, 0.9). FNN: weights uniform on +/- 1/sqrt(fan_in), zero biases.

    """
    kind = ModelKind(kind)
    rng = np.random.default_rng(rng_seed)
    if kind == ModelKind.GARCH:
        omega = rng.uniform(-0.1, 0.1)
        alpha = rng.uniform(-0.1, 0.1)
        beta = rng.uniform(0.3, 0.9)
        return GarchModel(GarchParams.from_values(omega, alpha, beta), seed=rng_seed)
    if kind in FNN_HIDDEN_LAYERS:
        sizes = (2, *FNN_HIDDEN_LAYERS[kind], 1)
        layers = [
            DenseLayer.init(rng, n_in, n_out, name=f"layer{i}")
            for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        return FnnModel(FnnParams(layers, kind), seed=rng_seed)
    raise ConfigError(f"{kind.value} is not a base forecaster")


def base_model_from_dict(data: Dict) -> BaseModel:
    kind = ModelKind(data["kind"])
    if kind == ModelKind.GARCH:
        return GarchModel.from_dict(data)
    if kind in FNN_HIDDEN_LAYERS:
        return FnnModel.from_dict(data)
    raise ConfigError(f"{kind.value} is not a base forecaster")
