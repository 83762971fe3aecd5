"""Dense layers and the positive transition-weight networks."""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from pmc_volatility.autodiff import Param, Tape, Value, linear, softplus, tanh
from pmc_volatility.errors import ConfigError

WEIGHT_FLOOR = 1e-6
STATE_GAIN = 3.0
LEVEL_GAIN = 2.0
TREND_WEIGHT = 1.0
HEAD_WEIGHT = 2.0


@dataclass(eq=False)
class DenseLayer:
    """An affine map `x -> W x + b`.

    Attributes
    ----------
    weights
        A `out_dim x in_dim` matrix of parameters.
    bias
        One parameter per output.

    """

    weights: List[List[Param]]
    bias: List[Param]

    def __post_init__(self):
        if len(self.weights) != len(self.bias) or not self.weights:
            raise ConfigError("A dense layer needs one bias per weight row")
        if len({len(row) for row in self.weights}) != 1:
            raise ConfigError("Dense layer weight rows must have the same length")

    @classmethod
    def init(
        cls, rng: np.random.Generator, in_dim: int, out_dim: int, name: str = "dense"
    ) -> "DenseLayer":
        """Uniform(-1/sqrt(in_dim), 1/sqrt(in_dim)) weights, zero biases."""
        bound = 1.0 / math.sqrt(in_dim)
        values = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        weights = [
            [Param(float(values[o, i]), name=f"{name}.w[{o},{i}]") for i in range(in_dim)]
            for o in range(out_dim)
        ]
        bias = [Param(0.0, name=f"{name}.b[{o}]") for o in range(out_dim)]
        return cls(weights, bias)

    @property
    def in_dim(self) -> int:
        return len(self.weights[0])

    @property
    def out_dim(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[Param]:
        return [w for row in self.weights for w in row] + list(self.bias)

    def __call__(self, inputs: Sequence[Value], tape: Optional[Tape] = None) -> List[Value]:
        if len(inputs) != self.in_dim:
            raise ConfigError(
                f"Dense layer expects {self.in_dim} inputs, got {len(inputs)}"
            )
        return [
            linear([w.on(tape) for w in row], inputs, b.on(tape))
            for row, b in zip(self.weights, self.bias)
        ]

    def to_dict(self) -> Dict:
        return {
            "weights": [[w.value for w in row] for row in self.weights],
            "bias": [b.value for b in self.bias],
        }

    @classmethod
    def from_dict(cls, data: Dict, name: str = "dense") -> "DenseLayer":
        weights = [
            [Param(float(w), name=f"{name}.w[{o},{i}]") for i, w in enumerate(row)]
            for o, row in enumerate(data["weights"])
        ]
        bias = [Param(float(b), name=f"{name}.b[{o}]") for o, b in enumerate(data["bias"])]
        return cls(weights, bias)


class PositiveWeightNet:
    """A strictly positive score of a state transition given observations.

    The input vector is `[one_hot(x), one_hot(x_next), obs]` and feeds one
    tanh hidden layer as wide as the input, then a softplus output shifted
    by `WEIGHT_FLOOR`.

    """

    # observation slots holding the next and the current normalized sigma2
    LEVEL_INDEX: Optional[int] = None
    PREVIOUS_LEVEL_INDEX: Optional[int] = None

    def __init__(self, n_states: int, obs_dim: int, hidden: DenseLayer, output: DenseLayer):
        in_dim = 2 * n_states + obs_dim
        if hidden.in_dim != in_dim:
            raise ConfigError(
                f"Hidden layer expects {hidden.in_dim} inputs, the net feeds {in_dim}"
            )
        if output.in_dim != hidden.out_dim or output.out_dim != 1:
            raise ConfigError("The output layer must map the hidden layer to a scalar")
        self.n_states = n_states
        self.obs_dim = obs_dim
        self.hidden = hidden
        self.output = output

    @classmethod
    def init(cls, n_states: int, obs_dim: int, rng: np.random.Generator):
        in_dim = 2 * n_states + obs_dim
        hidden = DenseLayer.init(rng, in_dim, in_dim, name="weight_net.hidden")
        output = DenseLayer.init(rng, in_dim, 1, name="weight_net.output")
        net = cls(n_states, obs_dim, hidden, output)
        if n_states > 1 and cls.LEVEL_INDEX is not None and cls.LEVEL_INDEX < obs_dim:
            net._order_states()
        return net

    def _order_states(self):
        """Start from persistent states ranked by volatility.

        Hidden unit `k < N` rewards staying in state `k`. Unit `N + j` only
        fires for `x_next = j` and grows with the next sigma2 for the last
        state, shrinks with it for the first. When the current sigma2 is
        observed too, the rise from it counts as much as the level. The other
        units see observations only.

        """
        n = self.n_states
        rows = self.hidden.weights
        for k, row in enumerate(rows):
            for p in row[: 2 * n]:
                p.value = 0.0
            if k < 2 * n:
                for p in row[2 * n :]:
                    p.value = 0.0
        for k in range(n):
            rows[k][k].value = STATE_GAIN
            rows[k][n + k].value = STATE_GAIN
            self.hidden.bias[k].value = -1.5 * STATE_GAIN

        trend = TREND_WEIGHT if self.PREVIOUS_LEVEL_INDEX is not None else 0.0
        for j in range(n):
            row = rows[n + j]
            slope = LEVEL_GAIN * (2.0 * j / (n - 1) - 1.0)
            row[n + j].value = STATE_GAIN
            row[2 * n + self.LEVEL_INDEX].value = slope * (1.0 + trend)
            if trend:
                row[2 * n + self.PREVIOUS_LEVEL_INDEX].value = -slope * trend
            self.hidden.bias[n + j].value = -STATE_GAIN
        for k in range(2 * n):
            self.output.weights[0][k].value = HEAD_WEIGHT

    def parameters(self) -> List[Param]:
        return self.hidden.parameters() + self.output.parameters()

    def _head(self, hidden: List[Value], tape: Optional[Tape]) -> Value:
        return softplus(self.output(hidden, tape)[0]) + WEIGHT_FLOOR

    def score(self, x: int, x_next: int, obs: Sequence[Value], tape: Optional[Tape] = None) -> Value:
        """Evaluate the net on an explicit one-hot input vector."""
        n = self.n_states
        inputs: List[Value] = [0.0] * (2 * n)
        inputs[x] = 1.0
        inputs[n + x_next] = 1.0
        inputs.extend(obs)
        hidden = [tanh(h) for h in self.hidden(inputs, tape)]
        return self._head(hidden, tape)

    def matrix(self, obs: Sequence[float], tape: Optional[Tape] = None) -> List[List[Value]]:
        """All `N x N` scores for one observation vector."""
        if len(obs) != self.obs_dim:
            raise ConfigError(f"Expected {self.obs_dim} observations, got {len(obs)}")
        return self.sequence([obs], tape)[0]

    def sequence(
        self, observations: Sequence[Sequence[float]], tape: Optional[Tape] = None
    ) -> List[List[List[Value]]]:
        """The `N x N` score matrices of many observation vectors at once.

        A one-hot input selects a single weight column, so the state part of
        the first layer is a lookup and only the observation part is computed
        per vector. Sums run left to right from the bias like `linear`.
        Observations are data: on a tape, all the scores form one block whose
        jacobian covers every parameter of the net.

        """
        if len(observations) == 0:
            return []
        obs = np.asarray(observations, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise ConfigError(
                f"Expected rows of {self.obs_dim} observations, got shape {obs.shape}"
            )
        n, width, steps = self.n_states, self.hidden.out_dim, obs.shape[0]
        weights = np.array([[w.value for w in row] for row in self.hidden.weights])
        bias = np.array([b.value for b in self.hidden.bias])
        head_weights = np.array([w.value for w in self.output.weights[0]])

        shared = np.broadcast_to(bias, (steps, width))
        for m in range(self.obs_dim):
            shared = shared + weights[:, 2 * n + m] * obs[:, m : m + 1]
        pairs = weights[:, :n].T[:, None, :] + weights[:, n : 2 * n].T[None, :, :]
        hidden = np.tanh(pairs[None] + shared[:, None, None, :])

        head = np.full((steps, n, n), self.output.bias[0].value)
        for k in range(width):
            head = head + head_weights[k] * hidden[..., k]
        decay = np.exp(-np.abs(head))
        scores = np.maximum(head, 0.0) + np.log1p(decay) + WEIGHT_FLOOR
        if tape is None:
            return scores.tolist()

        sigmoid = np.where(head >= 0, 1.0, decay) / (1.0 + decay)
        slope = sigmoid[..., None] * head_weights * (1.0 - hidden * hidden)
        eye = np.eye(n)
        inputs = np.concatenate(
            [
                np.broadcast_to(eye[None, :, None, :], (steps, n, n, n)),
                np.broadcast_to(eye[None, None, :, :], (steps, n, n, n)),
                np.broadcast_to(obs[:, None, None, :], (steps, n, n, self.obs_dim)),
            ],
            axis=-1,
        )
        jacobian = np.concatenate(
            [
                (slope[..., :, None] * inputs[..., None, :]).reshape(steps, n, n, -1),
                slope,
                sigmoid[..., None] * hidden,
                sigmoid[..., None],
            ],
            axis=-1,
        ).reshape(steps * n * n, -1)
        leaves = [p.on(tape) for p in self.parameters()]
        nodes = tape.record_block("weight_net", scores.ravel(), leaves, jacobian)
        return [
            [nodes[(t * n + i) * n : (t * n + i + 1) * n] for i in range(n)]
            for t in range(steps)
        ]

    def to_dict(self) -> Dict:
        return {
            "n_states": self.n_states,
            "obs_dim": self.obs_dim,
            "hidden": self.hidden.to_dict(),
            "output": self.output.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict):
        return cls(
            data["n_states"],
            data["obs_dim"],
            DenseLayer.from_dict(data["hidden"], name="weight_net.hidden"),
            DenseLayer.from_dict(data["output"], name="weight_net.output"),
        )


class TransitionWeightNet(PositiveWeightNet):
    """Scores `(x_t, x_next, y_t, y_next)`, standing for the product
    `p(x_t | y_t, y_next) / p(x_t | y_t) * p(x_next | x_t, y_t, y_next)`."""

    OBS_DIM = 4
    LEVEL_INDEX = 2
    PREVIOUS_LEVEL_INDEX = 0

    @classmethod
    def init(cls, n_states: int, rng: np.random.Generator, obs_dim: int = OBS_DIM):
        return super().init(n_states, obs_dim, rng)

    def __call__(self, x: int, x_next: int, y_t, y_next, tape: Optional[Tape] = None) -> Value:
        return self.score(x, x_next, [*y_t, *y_next], tape)

    def weights(self, y_t, y_next, tape: Optional[Tape] = None) -> List[List[Value]]:
        return self.matrix([*y_t, *y_next], tape)

    def weight_sequence(self, pairs, tape: Optional[Tape] = None) -> List[List[List[Value]]]:
        """`weights(pairs[t], pairs[t + 1])` for every step of a series."""
        return self.sequence(
            [[*y_t, *y_next] for y_t, y_next in zip(pairs[:-1], pairs[1:])], tape
        )


class DeltaWeightNet(PositiveWeightNet):
    """Scores `(x_t, x_next, y_next)`, standing for
    `p(x_next | x_t) / p(x_next) * p(x_next | y_next)`. It never sees `y_t`."""

    OBS_DIM = 2
    LEVEL_INDEX = 0

    @classmethod
    def init(cls, n_states: int, rng: np.random.Generator, obs_dim: int = OBS_DIM):
        return super().init(n_states, obs_dim, rng)

    def __call__(self, x: int, x_next: int, y_next, tape: Optional[Tape] = None) -> Value:
        return self.score(x, x_next, list(y_next), tape)

    def delta_weights(self, y_next, tape: Optional[Tape] = None) -> List[List[Value]]:
        return self.matrix(list(y_next), tape)

    def delta_sequence(self, pairs, tape: Optional[Tape] = None) -> List[List[List[Value]]]:
        """`delta_weights(pairs[t + 1])` for every step of a series."""
        return self.sequence([list(y_next) for y_next in pairs[1:]], tape)
