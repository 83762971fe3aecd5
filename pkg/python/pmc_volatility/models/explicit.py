"""Explicit finite pairwise and hidden Markov chains, used as exact oracles.

The observations take values in a finite alphabet `{0, ..., M - 1}`. The
explicit tables allow computing posteriors and forecasts the conventional
way, through the joint law of the observations, and the exact transition
weights that the observation-law-free recursions expect.

"""
import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from pmc_volatility.autodiff import Tape
from pmc_volatility.errors import (
    ConfigError,
    DegenerateEvidenceError,
    InvalidInputError,
)
from pmc_volatility.markov import check_stochastic, stationary_distribution
from pmc_volatility.models.filtering import FilteredPosterior

TABLE_TOLERANCE = 1e-12
MAX_ENUMERATION_LENGTH = 10
MAX_ENUMERATION_STATES = 4


def _posterior(scores: np.ndarray) -> FilteredPosterior:
    norm = scores.sum()
    if not norm > 0:
        raise DegenerateEvidenceError("The observations have probability zero")
    return FilteredPosterior(tuple((scores / norm).tolist()))


@dataclass(frozen=True, eq=False)
class ExplicitPmc:
    """A pairwise Markov chain given by its tables.

    Attributes
    ----------
    initial
        `initial[x, y] = p(x_1 = x, y_1 = y)`, shape `(N, M)`.
    transition
        `transition[x, y, x', y'] = p(x_{t+1} = x', y_{t+1} = y' | x_t = x, y_t = y)`,
        shape `(N, M, N, M)`.

    """

    initial: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        initial = np.asarray(self.initial, dtype=np.float64)
        transition = np.asarray(self.transition, dtype=np.float64)
        n, m = initial.shape
        if transition.shape != (n, m, n, m):
            raise ConfigError(
                f"Transition table shape {transition.shape} does not match {(n, m)}"
            )
        if np.any(initial < 0) or abs(initial.sum() - 1.0) > TABLE_TOLERANCE:
            raise ConfigError("The initial table must be a distribution")
        rows = transition.reshape(n * m, n * m)
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > TABLE_TOLERANCE):
            raise ConfigError("Every transition row must be a distribution")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.initial.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_symbols: int) -> "ExplicitPmc":
        size = n_states * n_symbols
        initial = rng.dirichlet(np.ones(size)).reshape(n_states, n_symbols)
        rows = rng.dirichlet(np.ones(size), size=size)
        return cls(initial, rows.reshape(n_states, n_symbols, n_states, n_symbols))

    @classmethod
    def uniform(cls, n_states: int, n_symbols: int) -> "ExplicitPmc":
        size = n_states * n_symbols
        initial = np.full((n_states, n_symbols), 1.0 / size)
        transition = np.full((n_states, n_symbols, n_states, n_symbols), 1.0 / size)
        return cls(initial, transition)

    @classmethod
    def independent(
        cls, rng: np.random.Generator, n_states: int, n_symbols: int
    ) -> "ExplicitPmc":
        """Pairs drawn i.i.d. from one law, whatever the previous pair."""
        law = rng.dirichlet(np.ones(n_states * n_symbols)).reshape(n_states, n_symbols)
        transition = np.broadcast_to(law, (n_states, n_symbols, n_states, n_symbols))
        return cls(law, transition.copy())

    @classmethod
    def from_hmm(cls, hmm: "ExplicitHmm") -> "ExplicitPmc":
        """`p(x', y' | x, y) = p(x' | x) p(y' | x')`."""
        a, b = hmm.transition, hmm.emission
        initial = hmm.initial[:, None] * b
        transition = a[:, None, :, None] * b[None, None, :, :]
        n, m = b.shape
        return cls(initial, np.broadcast_to(transition, (n, m, n, m)).copy())

    def _check(self, observations: Sequence[int]):
        if len(observations) == 0:
            raise InvalidInputError("At least one observation is needed")
        if any(not 0 <= y < self.n_symbols for y in observations):
            raise InvalidInputError(f"Observations must lie in [0, {self.n_symbols})")

    def joint(self, states: Sequence[int], observations: Sequence[int]) -> float:
        """`p(x_{1:t}, y_{1:t})`."""
        p = self.initial[states[0], observations[0]]
        for t in range(1, len(states)):
            p *= self.transition[
                states[t - 1], observations[t - 1], states[t], observations[t]
            ]
        return float(p)

    def initial_posterior(self, y1: int) -> FilteredPosterior:
        """`p(x_1 | y_1)`."""
        return _posterior(self.initial[:, y1])

    def conditional_means(self, values: Sequence[float]) -> np.ndarray:
        """`E[v(y_{t+1}) | x_t, y_t]` as an `(N, M)` table."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_symbols,):
            raise InvalidInputError("One value per observation symbol is needed")
        return np.einsum("xyab,b->xy", self.transition, values)

    def experts(self, values: Sequence[float]) -> List["TableExpert"]:
        """Per-state forecasters `f_x(y_t) = E[v(y_{t+1}) | x_t = x, y_t]`."""
        means = self.conditional_means(values)
        return [TableExpert(means[x]) for x in range(self.n_states)]


class TableExpert:
    """A forecaster looking its output up by observation symbol."""

    def __init__(self, table: np.ndarray):
        self.table = table

    def predict(self, y: int, tape: Optional[Tape] = None) -> float:
        return float(self.table[y])


def _recursion_posteriors(model: ExplicitPmc, observations: Sequence[int]):
    """Forward recursion on `p(x_t, y_{1:t})` through the observation law."""
    alpha = model.initial[:, observations[0]].copy()
    posteriors = [_posterior(alpha)]
    for y, y_next in zip(observations[:-1], observations[1:]):
        alpha = alpha @ model.transition[:, y, :, y_next]
        posteriors.append(_posterior(alpha))
        alpha = alpha / alpha.sum()
    return posteriors


def _enumeration_posteriors(model: ExplicitPmc, observations: Sequence[int]):
    """Sum the joint law over every hidden path `x_{1:t}`."""
    n = model.n_states
    if len(observations) > MAX_ENUMERATION_LENGTH or n > MAX_ENUMERATION_STATES:
        raise InvalidInputError(
            f"Enumeration is limited to T <= {MAX_ENUMERATION_LENGTH} "
            f"and N <= {MAX_ENUMERATION_STATES}"
        )
    posteriors = []
    for t in range(1, len(observations) + 1):
        scores = np.zeros(n)
        for path in itertools.product(range(n), repeat=t):
            scores[path[-1]] += model.joint(path, observations[:t])
        posteriors.append(_posterior(scores))
    return posteriors


def brute_force_posterior(
    model: ExplicitPmc, observations: Sequence[int], method: str = "enumeration"
) -> List[FilteredPosterior]:
    """Exact `p(x_t | y_{1:t})` for every `t`.

    `method` is `"enumeration"` (sum over hidden paths) or `"recursion"`
    (forward recursion through the joint law of the observations).

    """
    model._check(observations)
    if method == "enumeration":
        return _enumeration_posteriors(model, observations)
    if method == "recursion":
        return _recursion_posteriors(model, observations)
    raise ConfigError(f"Unknown method {method}")


def brute_force_forecast(
    model: ExplicitPmc, observations: Sequence[int], values: Sequence[float]
) -> List[float]:
    """Conventional forecasts `E[v(y_{t+1}) | y_{1:t}]`, `t = 1..T-1`, by enumeration.

    Every term goes through the observation law `p(y_{t+1} | x_t, y_t)`.

    """
    model._check(observations)
    values = np.asarray(values, dtype=np.float64)
    n = model.n_states
    forecasts = []
    for t in range(1, len(observations)):
        evidence = 0.0
        expectation = 0.0
        for path in itertools.product(range(n), repeat=t):
            joint = model.joint(path, observations[:t])
            law = model.transition[path[-1], observations[t - 1]].sum(axis=0)
            evidence += joint
            expectation += joint * float(law @ values)
        if not evidence > 0:
            raise DegenerateEvidenceError("The observations have probability zero")
        forecasts.append(expectation / evidence)
    return forecasts


class ExactWeightFunction:
    """The exact PMC transition weight of an explicit model.

    `w(x, x', y, y') = p(x | y, y') / p(x | y) * p(x' | x, y, y')`, each factor
    obtained by marginalizing the tables with `p(x_t, y_t)` taken as the
    initial law. Any reference law gives the same normalized posteriors.

    """

    def __init__(self, model: ExplicitPmc):
        self.model = model
        self.n_states = model.n_states
        self.reference = model.initial
        # p(y' | x, y), shape (N, M, M)
        self.emission = model.transition.sum(axis=2)

    def _row(self, x: int, y: int, y_next: int) -> np.ndarray:
        marginal = self.reference[:, y].sum()
        if not marginal > 0:
            raise DegenerateEvidenceError(f"Symbol {y} has probability zero")
        prior = self.reference[:, y] / marginal
        likelihood = self.emission[:, y, y_next]
        evidence = float(prior @ likelihood)
        if not evidence > 0:
            raise DegenerateEvidenceError(
                f"Symbol {y_next} cannot follow symbol {y}"
            )
        if likelihood[x] == 0:
            return np.zeros(self.n_states)
        if prior[x] > 0:
            ratio = (prior[x] * likelihood[x] / evidence) / prior[x]
        else:
            ratio = likelihood[x] / evidence
        return ratio * self.model.transition[x, y, :, y_next] / likelihood[x]

    def __call__(self, x: int, x_next: int, y: int, y_next: int) -> float:
        return float(self._row(x, y, y_next)[x_next])

    def weights(self, y_t: int, y_next: int, tape: Optional[Tape] = None):
        return [self._row(x, y_t, y_next).tolist() for x in range(self.n_states)]


def explicit_to_weightnet(model: ExplicitPmc) -> ExactWeightFunction:
    return ExactWeightFunction(model)


@dataclass(frozen=True, eq=False)
class ExplicitHmm:
    """A hidden Markov chain: `p(x_1)`, `p(x' | x)` and `p(y | x)` tables."""

    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        initial = np.asarray(self.initial, dtype=np.float64)
        transition = check_stochastic(self.transition, atol=TABLE_TOLERANCE)
        emission = np.asarray(self.emission, dtype=np.float64)
        n = transition.shape[0]
        if initial.shape != (n,) or emission.ndim != 2 or emission.shape[0] != n:
            raise ConfigError("HMM tables have inconsistent shapes")
        if np.any(initial < 0) or abs(initial.sum() - 1.0) > TABLE_TOLERANCE:
            raise ConfigError("The initial law must be a distribution")
        if np.any(emission < 0) or np.any(
            np.abs(emission.sum(axis=1) - 1.0) > TABLE_TOLERANCE
        ):
            raise ConfigError("Emission rows must be distributions")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "emission", emission)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_symbols: int) -> "ExplicitHmm":
        return cls(
            rng.dirichlet(np.ones(n_states)),
            rng.dirichlet(np.ones(n_states), size=n_states),
            rng.dirichlet(np.ones(n_symbols), size=n_states),
        )

    def initial_posterior(self, y1: int) -> FilteredPosterior:
        return _posterior(self.initial * self.emission[:, y1])


def hmm_forward_filter(hmm: ExplicitHmm, observations: Sequence[int]) -> List[FilteredPosterior]:
    """Scaled forward algorithm: `alpha' = (alpha A) * B[:, y']`, normalized."""
    alpha = hmm.initial * hmm.emission[:, observations[0]]
    alpha = alpha / alpha.sum()
    posteriors = [_posterior(alpha)]
    for y in observations[1:]:
        alpha = (alpha @ hmm.transition) * hmm.emission[:, y]
        scale = alpha.sum()
        if not scale > 0:
            raise DegenerateEvidenceError("The observations have probability zero")
        alpha = alpha / scale
        posteriors.append(_posterior(alpha))
    return posteriors


class ExactDeltaFunction:
    """The exact HMC weight `p(x' | x) / p(x') * p(x' | y')`, with `p(x')`
    the stationary law of the hidden chain."""

    def __init__(self, hmm: ExplicitHmm):
        self.hmm = hmm
        self.n_states = hmm.n_states
        self.marginal = stationary_distribution(hmm.transition)
        if np.any(self.marginal <= 0):
            raise DegenerateEvidenceError("A hidden state has stationary probability zero")

    def delta_weights(self, y_next: int, tape: Optional[Tape] = None):
        joint = self.hmm.emission[:, y_next] * self.marginal
        evidence = joint.sum()
        if not evidence > 0:
            raise DegenerateEvidenceError(f"Symbol {y_next} has probability zero")
        posterior = joint / evidence
        ratio = self.hmm.transition / self.marginal[None, :]
        return (ratio * posterior[None, :]).tolist()


def explicit_to_deltanet(hmm: ExplicitHmm) -> ExactDeltaFunction:
    return ExactDeltaFunction(hmm)


def max_abs_error(a: Sequence[FilteredPosterior], b: Sequence[FilteredPosterior]) -> float:
    if len(a) != len(b):
        raise InvalidInputError("Posterior sequences differ in length")
    return max(
        (abs(p - q) for pa, pb in zip(a, b) for p, q in zip(pa.values(), pb.values())),
        default=0.0,
    )


__all__ = [
    "ExactDeltaFunction",
    "ExactWeightFunction",
    "ExplicitHmm",
    "ExplicitPmc",
    "TableExpert",
    "brute_force_forecast",
    "brute_force_posterior",
    "explicit_to_deltanet",
    "explicit_to_weightnet",
    "hmm_forward_filter",
    "max_abs_error",
]
