"""Finite Markov chain utilities."""
from itertools import permutations
from typing import Sequence, Tuple

import numpy as np
import scipy.linalg

from pmc_volatility.errors import ConfigError, InvalidInputError


def check_stochastic(matrix: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigError(f"A transition matrix must be square, got {matrix.shape}")
    if np.any(matrix < 0) or not np.allclose(matrix.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise ConfigError("Transition matrix rows must be distributions")
    return matrix


def stationary_distribution(matrix: np.ndarray) -> np.ndarray:
    """Solve `pi P = pi`, `sum(pi) = 1` in the least-squares sense.

    For a reducible chain this returns the minimum-norm stationary law (the
    uniform law for the identity).

    """
    matrix = check_stochastic(matrix, atol=1e-9)
    n = matrix.shape[0]
    system = np.vstack([matrix.T - np.eye(n), np.ones((1, n))])
    rhs = np.concatenate([np.zeros(n), [1.0]])
    pi, *_ = scipy.linalg.lstsq(system, rhs)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def permutation_agreement(
    predicted: Sequence[int], truth: Sequence[int], n_states: int = 0
) -> Tuple[float, Tuple[int, ...]]:
    """Best fraction of agreement between two state paths over relabelings.

    Returns the agreement and the relabeling `mapping[predicted] -> truth`.

    """
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape or predicted.size == 0:
        raise InvalidInputError("State paths must be nonempty and of equal length")
    n = max(n_states, int(predicted.max()) + 1, int(truth.max()) + 1)

    best, best_mapping = -1.0, tuple(range(n))
    for mapping in permutations(range(n)):
        agreement = float(np.mean(np.asarray(mapping)[predicted] == truth))
        if agreement > best:
            best, best_mapping = agreement, mapping
    return best, best_mapping
