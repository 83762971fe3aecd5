"""HMC(N): the hidden Markov chain counterpart of `PmcModel`.

Its weight `delta(x_t, x_{t+1}, y_{t+1})` never sees `y_t`, which is the
structural restriction of a hidden Markov chain.

"""
import math
from typing import Dict, List, Optional, Protocol, Sequence, Union

import numpy as np

from pmc_volatility.autodiff import Param, Tape, Value, linear
from pmc_volatility.data import FeatureSeries
from pmc_volatility.errors import ConfigError
from pmc_volatility.models.base import ModelKind, Pair
from pmc_volatility.models.filtering import (
    FilteredPosterior,
    FilterResult,
    advance,
    run_filter,
    softmax_posterior,
)
from pmc_volatility.models.networks import DeltaWeightNet

HEAD_SEED_SALT = 0x484D43


class DeltaFunction(Protocol):
    n_states: int

    def delta_weights(self, y_next, tape: Optional[Tape] = None) -> List[List[Value]]:
        ...


class AffineHead:
    """Per-state forecast `c + a * sigma2_t + b * u2_t`, or `c` alone."""

    def __init__(self, const: Param, a: Param, b: Param, constants_only: bool = False):
        self.const = const
        self.a = a
        self.b = b
        self.constants_only = constants_only

    @classmethod
    def init(cls, rng: np.random.Generator, index: int, constants_only: bool = False):
        bound = 1.0 / math.sqrt(2)
        a, b = rng.uniform(-bound, bound, size=2)
        return cls(
            Param(0.0, name=f"head[{index}].c"),
            Param(float(a), name=f"head[{index}].a"),
            Param(float(b), name=f"head[{index}].b"),
            constants_only,
        )

    def parameters(self) -> List[Param]:
        if self.constants_only:
            return [self.const]
        return [self.const, self.a, self.b]

    def predict(self, y: Pair, tape: Optional[Tape] = None) -> Value:
        if self.constants_only:
            return self.const.on(tape)
        return linear([self.a.on(tape), self.b.on(tape)], [y[0], y[1]], self.const.on(tape))

    def to_dict(self) -> Dict:
        return {"c": self.const.value, "a": self.a.value, "b": self.b.value}


def delta_step(
    posterior: FilteredPosterior,
    y_next,
    net: DeltaFunction,
    tape: Optional[Tape] = None,
) -> FilteredPosterior:
    """`delta(x') = sum_x p(x | y_{1:t}) net(x, x', y_{t+1})`, normalized."""
    if len(posterior) == 1:
        return FilteredPosterior((1.0,))
    return advance(posterior, net.delta_weights(y_next, tape))


def hmc_predict(
    posterior: FilteredPosterior,
    y_t,
    heads: Sequence[AffineHead],
    tape: Optional[Tape] = None,
) -> Value:
    if len(heads) != len(posterior):
        raise ConfigError(f"{len(heads)} heads for {len(posterior)} states")
    return linear(list(posterior.probs), [head.predict(y_t, tape) for head in heads])


class HmcModel:
    kind = ModelKind.HMC

    def __init__(
        self,
        delta_net: DeltaWeightNet,
        heads: Sequence[AffineHead],
        initial_logits: Sequence[Param],
        seed: Optional[int] = None,
    ):
        n_states = len(heads)
        if n_states < 1:
            raise ConfigError("An HMC needs at least one hidden state")
        if delta_net.n_states != n_states or len(initial_logits) != n_states:
            raise ConfigError(
                f"The delta net and initial logits must cover {n_states} states"
            )
        if len({head.constants_only for head in heads}) != 1:
            raise ConfigError("All the heads must share the constants-only mode")
        self.delta_net = delta_net
        self.heads = list(heads)
        self.initial_logits = list(initial_logits)
        self.seed = seed

    @classmethod
    def init(cls, n_states: int, seed: int, constants_only: bool = False) -> "HmcModel":
        if n_states < 1:
            raise ConfigError(f"An HMC needs at least one hidden state, got {n_states}")
        net = DeltaWeightNet.init(n_states, np.random.default_rng((seed, HEAD_SEED_SALT, 0)))
        rng = np.random.default_rng((seed, HEAD_SEED_SALT, 1))
        heads = [AffineHead.init(rng, i, constants_only) for i in range(n_states)]
        logits = [Param(0.0, name=f"initial_logit[{i}]") for i in range(n_states)]
        return cls(net, heads, logits, seed=seed)

    @property
    def n_states(self) -> int:
        return len(self.heads)

    @property
    def constants_only(self) -> bool:
        return self.heads[0].constants_only

    @property
    def label(self) -> str:
        return f"HMC({self.n_states})"

    def parameters(self) -> List[Param]:
        params = [p for head in self.heads for p in head.parameters()]
        return params + self.delta_net.parameters() + self.initial_logits

    def initial_posterior(self, tape: Optional[Tape] = None) -> FilteredPosterior:
        return softmax_posterior(self.initial_logits, tape)

    def filter(self, pairs: Sequence[Pair], tape: Optional[Tape] = None) -> FilterResult:
        return hmc_filter(self, pairs, tape)

    def describe_states(self) -> List[Dict]:
        return [head.to_dict() for head in self.heads]

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind.value,
            "n_states": self.n_states,
            "constants_only": self.constants_only,
            "heads": [head.to_dict() for head in self.heads],
            "delta_net": self.delta_net.to_dict(),
            "initial_logits": [l.value for l in self.initial_logits],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "HmcModel":
        constants_only = data.get("constants_only", False)
        heads = [
            AffineHead(
                Param(float(h["c"]), name=f"head[{i}].c"),
                Param(float(h["a"]), name=f"head[{i}].a"),
                Param(float(h["b"]), name=f"head[{i}].b"),
                constants_only,
            )
            for i, h in enumerate(data["heads"])
        ]
        return cls(
            DeltaWeightNet.from_dict(data["delta_net"]),
            heads,
            [
                Param(float(l), name=f"initial_logit[{i}]")
                for i, l in enumerate(data["initial_logits"])
            ],
            seed=data.get("seed"),
        )


def hmc_filter(
    model: HmcModel,
    features: Union[FeatureSeries, Sequence[Pair]],
    tape: Optional[Tape] = None,
) -> FilterResult:
    pairs = features.pairs() if isinstance(features, FeatureSeries) else features
    if model.n_states > 1 and len(pairs) >= 2:
        matrices = model.delta_net.delta_sequence(pairs, tape)
    else:
        matrices = [None] * max(len(pairs) - 1, 0)
    steps = list(zip(pairs, [None, *matrices]))
    return run_filter(
        model.initial_posterior(tape),
        steps,
        lambda posterior, _, step: advance(posterior, step[1]),
        lambda posterior, step: hmc_predict(posterior, step[0], model.heads, tape),
    )
