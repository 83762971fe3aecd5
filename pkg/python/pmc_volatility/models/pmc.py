"""PMC(N)-f: N copies of a base forecaster mixed by the filtered posterior.

The posterior is updated without any observation law:

    gamma_{t+1}(x') = sum_x p(x | y_{1:t}) w(x, x', y_t, y_{t+1})
    p(x' | y_{1:t+1}) = gamma_{t+1}(x') / sum gamma_{t+1}

where `w` is any strictly positive function standing for
`p(x | y_t, y_{t+1}) / p(x | y_t) * p(x' | x, y_t, y_{t+1})`, and the forecast is

    y_hat_{t+1} = sum_x p(x | y_{1:t}) f_x(y_t).

"""
from typing import Dict, List, Optional, Protocol, Sequence, Union

import numpy as np

from pmc_volatility.autodiff import Param, Tape, Value, linear
from pmc_volatility.data import FeatureSeries
from pmc_volatility.errors import ConfigError
from pmc_volatility.models.base import (
    LABELS,
    Forecaster,
    ModelKind,
    Pair,
    base_model_from_dict,
    init_model,
)
from pmc_volatility.models.filtering import (
    FilteredPosterior,
    FilterResult,
    advance,
    run_filter,
    softmax_posterior,
)
from pmc_volatility.models.networks import TransitionWeightNet

EXPERT_SEED_STRIDE = 7919
WEIGHT_NET_SALT = 0x504D43


class WeightFunction(Protocol):
    """Positive transition weights `w[x][x_next]` for one pair of observations."""

    n_states: int

    def weights(self, y_t, y_next, tape: Optional[Tape] = None) -> List[List[Value]]:
        ...


class Expert(Protocol):
    def predict(self, y, tape: Optional[Tape] = None) -> Value:
        ...


def gamma_step(
    posterior: FilteredPosterior,
    y_t,
    y_next,
    net: WeightFunction,
    tape: Optional[Tape] = None,
) -> FilteredPosterior:
    """Move the filtered posterior from `t` to `t + 1`."""
    if len(posterior) == 1:
        return FilteredPosterior((1.0,))
    return advance(posterior, net.weights(y_t, y_next, tape))


def pmc_predict(
    posterior: FilteredPosterior,
    y_t,
    experts: Sequence[Expert],
    tape: Optional[Tape] = None,
) -> Value:
    """Posterior-weighted average of the experts' forecasts."""
    if len(experts) != len(posterior):
        raise ConfigError(
            f"{len(experts)} experts for a posterior over {len(posterior)} states"
        )
    forecasts = [expert.predict(y_t, tape) for expert in experts]
    return linear(list(posterior.probs), forecasts)


class PmcModel:
    """A pairwise Markov chain extension of a base forecaster.

    Attributes
    ----------
    experts
        One base forecaster per hidden state, all of the same kind.
    weight_net
        The positive transition weight `w(x_t, x_{t+1}, y_t, y_{t+1})`.
    initial_logits
        Unconstrained logits of `p(x_1 | y_1)`.

    """

    kind = ModelKind.PMC

    def __init__(
        self,
        experts: Sequence[Forecaster],
        weight_net: TransitionWeightNet,
        initial_logits: Sequence[Param],
        seed: Optional[int] = None,
    ):
        n_states = len(experts)
        if n_states < 1:
            raise ConfigError("A PMC needs at least one hidden state")
        if not all(isinstance(expert, Forecaster) for expert in experts):
            raise ConfigError("The experts of a PMC must be pointwise forecasters")
        if len({expert.kind for expert in experts}) != 1:
            raise ConfigError("All the experts of a PMC must share their architecture")
        if weight_net.n_states != n_states or len(initial_logits) != n_states:
            raise ConfigError(
                f"The weight net and initial logits must cover {n_states} states"
            )
        self.experts: List[Forecaster] = list(experts)
        self.weight_net = weight_net
        self.initial_logits = list(initial_logits)
        self.seed = seed

    @classmethod
    def init(
        cls, base: Union[ModelKind, str], n_states: int, seed: int
    ) -> "PmcModel":
        """Expert `i` uses seed `seed + i * EXPERT_SEED_STRIDE`; expert 0 thus
        matches the plain base model drawn with `seed`."""
        if n_states < 1:
            raise ConfigError(f"A PMC needs at least one hidden state, got {n_states}")
        experts = [
            init_model(base, seed + i * EXPERT_SEED_STRIDE) for i in range(n_states)
        ]
        rng = np.random.default_rng((seed, WEIGHT_NET_SALT))
        net = TransitionWeightNet.init(n_states, rng)
        logits = [Param(0.0, name=f"initial_logit[{i}]") for i in range(n_states)]
        return cls(experts, net, logits, seed=seed)

    @property
    def n_states(self) -> int:
        return len(self.experts)

    @property
    def base_kind(self) -> ModelKind:
        return self.experts[0].kind

    @property
    def label(self) -> str:
        return f"PMC({self.n_states})-{LABELS[self.base_kind]}"

    def parameters(self) -> List[Param]:
        params = [p for expert in self.experts for p in expert.parameters()]
        return params + self.weight_net.parameters() + self.initial_logits

    def initial_posterior(self, tape: Optional[Tape] = None) -> FilteredPosterior:
        return softmax_posterior(self.initial_logits, tape)

    def filter(self, pairs: Sequence[Pair], tape: Optional[Tape] = None) -> FilterResult:
        return forward_filter(self, pairs, tape)

    def describe_states(self) -> List[Dict]:
        return [expert.describe() for expert in self.experts]

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind.value,
            "n_states": self.n_states,
            "base": self.base_kind.value,
            "experts": [expert.to_dict() for expert in self.experts],
            "weight_net": self.weight_net.to_dict(),
            "initial_logits": [l.value for l in self.initial_logits],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PmcModel":
        return cls(
            [base_model_from_dict(expert) for expert in data["experts"]],
            TransitionWeightNet.from_dict(data["weight_net"]),
            [
                Param(float(l), name=f"initial_logit[{i}]")
                for i, l in enumerate(data["initial_logits"])
            ],
            seed=data.get("seed"),
        )


def forward_filter(
    model: PmcModel,
    features: Union[FeatureSeries, Sequence[Pair]],
    tape: Optional[Tape] = None,
) -> FilterResult:
    """Filter the posteriors and forecast every next volatility.

    Returns `T` posteriors and `T - 1` forecasts of the normalized `sigma2`.
    The weights of all steps are evaluated up front; `steps[t + 1]` carries
    the matrix that moves the posterior from `t` to `t + 1`.

    """
    pairs = features.pairs() if isinstance(features, FeatureSeries) else features
    if model.n_states > 1 and len(pairs) >= 2:
        matrices = model.weight_net.weight_sequence(pairs, tape)
    else:
        matrices = [None] * max(len(pairs) - 1, 0)
    steps = list(zip(pairs, [None, *matrices]))
    return run_filter(
        model.initial_posterior(tape),
        steps,
        lambda posterior, _, step: advance(posterior, step[1]),
        lambda posterior, step: pmc_predict(posterior, step[0], model.experts, tape),
    )
