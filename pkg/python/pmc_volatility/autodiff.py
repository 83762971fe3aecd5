"""Reverse-mode automatic differentiation over scalar computation graphs.

Every operation accepts plain floats or `Node` instances. With floats only
it returns a float, so the same model code serves for fast evaluation and
for recorded evaluation on a `Tape`. Both paths perform the exact same
floating-point operations.

"""
import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from pmc_volatility.errors import DomainError, NonFiniteError, UsageError

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Param:
    """A trainable scalar with its gradient and Adam moments."""

    value: float
    grad: float = 0.0
    m: float = 0.0
    v: float = 0.0
    step: int = 0
    name: str = ""

    def on(self, tape: Optional["Tape"]) -> "Value":
        """The parameter as an operand: its value, or its leaf node on `tape`."""
        if tape is None:
            return self.value
        return tape.leaf(self)


class Node:
    """A value recorded on a `Tape`."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: float):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Node(index={self.index}, value={self.value!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


Value = Union[float, Node]


class Tape:
    """An append-only record of scalar operations.

    Inputs always precede outputs, so the graph is acyclic by construction.

    """

    def __init__(self):
        self.kinds: List[str] = []
        self.values: List[float] = []
        self.parents: List[Tuple[int, ...]] = []
        self.partials: List[Tuple[float, ...]] = []
        self._leaves: Dict[int, Tuple[Param, int]] = {}
        self._blocks: Dict[int, Tuple[int, np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.values)

    def leaf(self, param: Param) -> Node:
        """The node standing for `param`, created on first use."""
        entry = self._leaves.get(id(param))
        if entry is None:
            index = self._append("param", param.value, (), ())
            self._leaves[id(param)] = (param, index)
            return Node(self, index, param.value)
        return Node(self, entry[1], self.values[entry[1]])

    @property
    def params(self) -> List[Param]:
        return [param for param, _ in self._leaves.values()]

    def _append(self, kind, value, parents, partials) -> int:
        index = len(self.values)
        self.kinds.append(kind)
        self.values.append(value)
        self.parents.append(parents)
        self.partials.append(partials)
        return index

    def record(
        self, kind: str, value: float, inputs: Iterable[Tuple[Value, float]]
    ) -> Node:
        """Append a node whose local derivative w.r.t. each node input is given."""
        if not math.isfinite(value):
            raise NonFiniteError(
                f"Operation {kind} produced {value} at node {len(self.values)}",
                node_id=len(self.values),
            )
        parents, partials = [], []
        for operand, partial in inputs:
            if isinstance(operand, Node):
                if operand.tape is not self:
                    raise UsageError("Operands belong to different tapes")
                parents.append(operand.index)
                partials.append(partial)
        index = self._append(kind, value, tuple(parents), tuple(partials))
        return Node(self, index, value)

    def record_block(
        self,
        kind: str,
        values: np.ndarray,
        inputs: Sequence[Value],
        jacobian: np.ndarray,
    ) -> List[Node]:
        """Append one node per entry of `values`, all sharing `inputs`.

        `jacobian[r, c]` is d(values[r]) / d(inputs[c]). `backward` applies it
        as a single matrix product once every adjoint of the block is known.

        """
        values = np.asarray(values, dtype=np.float64)
        jacobian = np.asarray(jacobian, dtype=np.float64)
        if values.ndim != 1 or jacobian.shape != (values.size, len(inputs)):
            raise UsageError(
                f"A block of {values.size} values needs a {values.size} x {len(inputs)} jacobian"
            )
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise NonFiniteError(
                f"Operation {kind} produced {values[bad[0]]} at node {len(self.values) + bad[0]}",
                node_id=len(self.values) + int(bad[0]),
            )
        columns = []
        for c, operand in enumerate(inputs):
            if isinstance(operand, Node):
                if operand.tape is not self:
                    raise UsageError("Operands belong to different tapes")
                columns.append(c)
        parents = tuple(inputs[c].index for c in columns)

        start = len(self.values)
        nodes = []
        for value in values.tolist():
            index = self._append(kind, value, parents, ())
            nodes.append(Node(self, index, value))
        if nodes:
            self._blocks[start] = (
                len(self.values),
                np.asarray(parents, dtype=np.int64),
                jacobian[:, columns],
            )
        return nodes

    def backward(self, output: Node) -> Dict[Param, float]:
        return backward(self, output)

    def to_dict(self) -> Dict:
        return {
            "nodes": [
                {"id": i, "op": kind, "inputs": list(parents), "value": value}
                for i, (kind, parents, value) in enumerate(
                    zip(self.kinds, self.parents, self.values)
                )
            ]
        }

    def dump_json(self, path) -> None:
        """Write the graph to `path` for inspection."""
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)


def value_of(x: Value) -> float:
    return x.value if isinstance(x, Node) else float(x)


def _tape_of(*operands: Value) -> Optional[Tape]:
    tape = None
    for operand in operands:
        if isinstance(operand, Node):
            if tape is None:
                tape = operand.tape
            elif operand.tape is not tape:
                raise UsageError("Operands belong to different tapes")
    return tape


def _node_id(x: Value) -> Optional[int]:
    return x.index if isinstance(x, Node) else None


def _finite(kind: str, value: float) -> float:
    if not math.isfinite(value):
        raise NonFiniteError(f"Operation {kind} produced {value}")
    return value


def add(a: Value, b: Value) -> Value:
    value = value_of(a) + value_of(b)
    tape = _tape_of(a, b)
    if tape is None:
        return _finite("add", value)
    return tape.record("add", value, ((a, 1.0), (b, 1.0)))


def sub(a: Value, b: Value) -> Value:
    value = value_of(a) - value_of(b)
    tape = _tape_of(a, b)
    if tape is None:
        return _finite("sub", value)
    return tape.record("sub", value, ((a, 1.0), (b, -1.0)))


def neg(a: Value) -> Value:
    value = -value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record("neg", value, ((a, -1.0),))


def mul(a: Value, b: Value) -> Value:
    va, vb = value_of(a), value_of(b)
    value = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return _finite("mul", value)
    return tape.record("mul", value, ((a, vb), (b, va)))


def div(a: Value, b: Value) -> Value:
    va, vb = value_of(a), value_of(b)
    if vb == 0.0:
        raise DomainError("Division by zero", node_id=_node_id(b))
    value = va / vb
    tape = _tape_of(a, b)
    if tape is None:
        return _finite("div", value)
    return tape.record("div", value, ((a, 1.0 / vb), (b, -value / vb)))


def square(a: Value) -> Value:
    va = value_of(a)
    value = va * va
    tape = _tape_of(a)
    if tape is None:
        return _finite("square", value)
    return tape.record("square", value, ((a, 2.0 * va),))


def tanh(a: Value) -> Value:
    value = math.tanh(value_of(a))
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record("tanh", value, ((a, 1.0 - value * value),))


def exp(a: Value) -> Value:
    try:
        value = math.exp(value_of(a))
    except OverflowError as e:
        raise NonFiniteError(f"exp overflow: {e}", node_id=_node_id(a)) from e
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record("exp", value, ((a, value),))


def ln(a: Value) -> Value:
    va = value_of(a)
    if not va > 0:
        raise DomainError(f"Logarithm of nonpositive value {va}", node_id=_node_id(a))
    value = math.log(va)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record("ln", value, ((a, 1.0 / va),))


def _softplus(x: float) -> float:
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def softplus(a: Value) -> Value:
    va = value_of(a)
    value = _softplus(va)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record("softplus", value, ((a, _sigmoid(va)),))


def total(values: Sequence[Value]) -> Value:
    """Sum of `values`, accumulated left to right from 0.0."""
    value = 0.0
    for x in values:
        value += value_of(x)
    tape = _tape_of(*values)
    if tape is None:
        return _finite("sum", value)
    return tape.record("sum", value, ((x, 1.0) for x in values))


def linear(weights: Sequence[Value], inputs: Sequence[Value], bias: Value = 0.0) -> Value:
    """`bias + sum_i weights[i] * inputs[i]`, accumulated left to right."""
    if len(weights) != len(inputs):
        raise UsageError(
            f"linear got {len(weights)} weights for {len(inputs)} inputs"
        )
    ws = [value_of(w) for w in weights]
    xs = [value_of(x) for x in inputs]
    value = value_of(bias)
    for w, x in zip(ws, xs):
        value += w * x
    tape = _tape_of(bias, *weights, *inputs)
    if tape is None:
        return _finite("linear", value)
    operands = [(bias, 1.0)]
    operands.extend(zip(weights, xs))
    operands.extend(zip(inputs, ws))
    return tape.record("linear", value, operands)


def backward(tape: Tape, output: Node) -> Dict[Param, float]:
    """Reverse-accumulate d(output)/d(leaf) for every parameter on the tape.

    The gradients are added to `Param.grad` and also returned.

    """
    if not isinstance(output, Node) or output.tape is not tape:
        raise UsageError("The output node is not on this tape")

    adjoint = [0.0] * (output.index + 1)
    adjoint[output.index] = 1.0
    parents, partials, blocks = tape.parents, tape.partials, tape._blocks
    for i in range(output.index, -1, -1):
        if i in blocks:
            stop, block_parents, jacobian = blocks[i]
            g_block = np.asarray(adjoint[i : min(stop, output.index + 1)])
            if np.any(g_block):
                pulled = g_block @ jacobian[: g_block.size]
                for p, d in zip(block_parents.tolist(), pulled.tolist()):
                    adjoint[p] += d
            continue
        g = adjoint[i]
        if g == 0.0:
            continue
        for p, d in zip(parents[i], partials[i]):
            adjoint[p] += g * d

    gradients = {}
    for param, index in tape._leaves.values():
        g = adjoint[index] if index <= output.index else 0.0
        if not math.isfinite(g):
            raise NonFiniteError(f"Nonfinite gradient for parameter {param.name}")
        param.grad += g
        gradients[param] = g
    return gradients


def gradcheck(
    loss: Callable[[Optional[Tape]], Value],
    params: Sequence[Param],
    h: float = 1e-5,
    rtol: float = 1e-5,
    atol: float = 1e-8,
) -> List[Tuple[Param, float, float]]:
    """Compare tape gradients with central finite differences.

    `loss(tape)` must evaluate the objective, recorded on `tape` when it is
    not `None`. Returns `(param, analytic, numeric)` for every mismatch.

    """
    tape = Tape()
    output = loss(tape)
    if not isinstance(output, Node):
        raise UsageError("The loss does not depend on any recorded parameter")
    analytic = backward(tape, output)

    mismatches = []
    for param in params:
        original = param.value
        param.value = original + h
        upper = value_of(loss(None))
        param.value = original - h
        lower = value_of(loss(None))
        param.value = original
        param.grad = 0.0

        numeric = (upper - lower) / (2 * h)
        exact = analytic.get(param, 0.0)
        error = abs(exact - numeric)
        if error > atol and error > rtol * max(abs(exact), abs(numeric)):
            mismatches.append((param, exact, numeric))
    return mismatches
