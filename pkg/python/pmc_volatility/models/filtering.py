"""Filtered posteriors and the sequential recursion shared by PMC and HMC."""
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from pmc_volatility.autodiff import Node, Param, Tape, Value, div, exp, linear, total, value_of
from pmc_volatility.errors import InvalidInputError, NumericalDegeneracyError

POSTERIOR_TOLERANCE = 1e-9

Obs = TypeVar("Obs")


@dataclass(frozen=True)
class FilteredPosterior:
    """The distribution `p(x_t | y_{1:t})` over the hidden states.

    Entries may be `Node`s when the posterior is recorded on a tape; the
    distribution invariants are checked on plain floats only.

    """

    probs: Tuple[Value, ...]

    def __post_init__(self):
        probs = tuple(self.probs)
        object.__setattr__(self, "probs", probs)
        if not probs:
            raise InvalidInputError("A posterior needs at least one state")
        if any(isinstance(p, Node) for p in probs):
            return
        if any(p < 0 for p in probs) or abs(math.fsum(probs) - 1.0) > POSTERIOR_TOLERANCE:
            raise InvalidInputError(f"Not a probability vector: {probs}")

    @classmethod
    def uniform(cls, n_states: int) -> "FilteredPosterior":
        return cls((1.0 / n_states,) * n_states)

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, index: int) -> Value:
        return self.probs[index]

    def __iter__(self):
        return iter(self.probs)

    def values(self) -> Tuple[float, ...]:
        return tuple(value_of(p) for p in self.probs)

    def argmax(self) -> int:
        return int(np.argmax(self.values()))


@dataclass
class FilterResult:
    """Output of a filtering pass over `T` observations.

    Attributes
    ----------
    predictions
        `T - 1` one-step-ahead forecasts; `predictions[t]` targets step `t + 1`.
    posteriors
        `T` filtered posteriors, or `None` for models without hidden states.

    """

    predictions: List[Value]
    posteriors: Optional[List[FilteredPosterior]] = None

    def prediction_values(self) -> np.ndarray:
        return np.array([value_of(p) for p in self.predictions])

    def posterior_values(self) -> np.ndarray:
        if self.posteriors is None:
            return np.ones((len(self.predictions) + 1, 1))
        return np.array([p.values() for p in self.posteriors])


def softmax_posterior(logits: Sequence[Param], tape: Optional[Tape] = None) -> FilteredPosterior:
    """Normalized exponential of trainable logits; a single state is certain."""
    if len(logits) == 1:
        return FilteredPosterior((1.0,))
    shift = max(l.value for l in logits)
    scores = [exp(l.on(tape) - shift) for l in logits]
    return normalize_scores(scores)


def normalize_scores(scores: Sequence[Value]) -> FilteredPosterior:
    """Divide nonnegative scores by their sum."""
    norm = total(scores)
    if value_of(norm) == 0.0:
        raise NumericalDegeneracyError("All the unnormalized filter weights are zero")
    return FilteredPosterior(tuple(div(s, norm) for s in scores))


def propagate(posterior: FilteredPosterior, weights: Sequence[Sequence[Value]]) -> List[Value]:
    """`score[j] = sum_i posterior[i] * weights[i][j]`."""
    n = len(posterior)
    if len(weights) != n:
        raise InvalidInputError(
            f"Weight matrix has {len(weights)} rows for {n} states"
        )
    probs = list(posterior.probs)
    return [linear(probs, [weights[i][j] for i in range(n)]) for j in range(n)]


def advance(posterior: FilteredPosterior, weights: Sequence[Sequence[Value]]) -> FilteredPosterior:
    """Propagate through a weight matrix and renormalize; a single state stays certain."""
    if len(posterior) == 1:
        return FilteredPosterior((1.0,))
    return normalize_scores(propagate(posterior, weights))


def run_filter(
    initial: FilteredPosterior,
    observations: Sequence[Obs],
    update: Callable[[FilteredPosterior, Obs, Obs], FilteredPosterior],
    predict: Callable[[FilteredPosterior, Obs], Value],
) -> FilterResult:
    """Alternate prediction and posterior update along the observations.

    The forecast of step `t + 1` uses the posterior at `t` and `y_t` only;
    the posterior moves to `t + 1` once `y_{t+1}` is revealed.

    """
    if len(observations) < 2:
        raise InvalidInputError("Filtering needs at least two observations")
    posteriors = [initial]
    predictions = []
    for t in range(len(observations) - 1):
        predictions.append(predict(posteriors[t], observations[t]))
        posteriors.append(update(posteriors[t], observations[t], observations[t + 1]))
    return FilterResult(predictions, posteriors)
