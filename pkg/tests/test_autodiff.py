import json
import math

import numpy as np
import pytest
from pmc_volatility.autodiff import (
    Node,
    Param,
    Tape,
    add,
    backward,
    div,
    exp,
    gradcheck,
    linear,
    ln,
    mul,
    softplus,
    square,
    sub,
    tanh,
    total,
    value_of,
)
from pmc_volatility.errors import DomainError, NonFiniteError, UsageError
from pytest import approx


def composite(x, y, tape=None):
    a, b = x.on(tape), y.on(tape)
    return total(
        [
            tanh(mul(a, b)),
            div(exp(a), add(square(b), 1.0)),
            ln(softplus(sub(a, b))),
            linear([a, b], [b, 2.0], 0.5),
        ]
    )


def test_float_and_tape_paths_agree_bitwise():
    x, y = Param(0.3), Param(-1.7)
    tape = Tape()
    recorded = composite(x, y, tape)
    assert isinstance(recorded, Node)
    assert recorded.value == composite(x, y)


def test_backward_simple_expression():
    x, y = Param(2.0, name="x"), Param(-3.0, name="y")
    tape = Tape()
    f = x.on(tape) * y.on(tape) + tanh(x.on(tape))
    gradients = backward(tape, f)
    assert gradients[x] == approx(-3.0 + 1.0 - math.tanh(2.0) ** 2, rel=1e-14)
    assert gradients[y] == approx(2.0, rel=1e-14)
    assert x.grad == gradients[x]


def test_backward_accumulates_shared_leaves():
    x = Param(1.5)
    tape = Tape()
    a = x.on(tape)
    f = a * a + a
    backward(tape, f)
    assert x.grad == approx(2 * 1.5 + 1.0)
    assert len(tape.params) == 1


def test_linear_and_total():
    assert linear([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], 0.5) == 32.5
    assert total([0.1, 0.2, 0.3]) == (0.0 + 0.1) + 0.2 + 0.3
    with pytest.raises(UsageError):
        linear([1.0], [1.0, 2.0])


def test_softplus_is_stable():
    assert softplus(1000.0) == 1000.0
    assert 0.0 < softplus(-700.0) < 1e-300
    assert softplus(0.0) == approx(math.log(2.0))


def test_domain_errors():
    tape = Tape()
    z = Param(0.0).on(tape)
    with pytest.raises(DomainError) as e:
        div(1.0, z)
    assert e.value.node_id == z.index
    with pytest.raises(DomainError):
        ln(z)
    with pytest.raises(DomainError):
        ln(-1.0)


def test_nonfinite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        exp(1000.0)
    tape = Tape()
    big = Param(1e308).on(tape)
    with pytest.raises(NonFiniteError):
        mul(big, 10.0)
    with pytest.raises(NonFiniteError):
        add(1e308, 1e308)


def test_mixing_tapes():
    p = Param(1.0)
    a, b = p.on(Tape()), p.on(Tape())
    with pytest.raises(UsageError):
        add(a, b)

    other = Tape()
    c = Param(2.0).on(other)
    with pytest.raises(UsageError):
        backward(Tape(), c)


def test_gradcheck_composite():
    x, y = Param(0.3), Param(-1.7)
    assert gradcheck(lambda tape: composite(x, y, tape), [x, y]) == []
    assert x.value == 0.3 and y.value == -1.7


ARITY = {
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "tanh": 1,
    "exp": 1,
    "ln": 1,
    "softplus": 1,
    "square": 1,
    "linear": 4,
    "sum": 3,
}


def random_program(seed, n_leaves, n_ops):
    """Ops with operand indices into the pool of earlier nodes; every op
    kind appears at least once."""
    rng = np.random.default_rng(seed)
    kinds = list(ARITY)
    program = []
    for i in range(n_ops):
        kind = kinds[i] if i < len(kinds) else kinds[rng.integers(len(kinds))]
        program.append((kind, rng.integers(n_leaves + i, size=ARITY[kind]).tolist()))
    return program


def run_program(program, params, tape=None):
    pool = [p.on(tape) for p in params]
    for kind, picks in program:
        # squashed operands keep every intermediate bounded and in domain
        x = [tanh(pool[k]) for k in picks]
        if kind == "add":
            out = add(x[0], x[1])
        elif kind == "sub":
            out = sub(x[0], x[1])
        elif kind == "mul":
            out = mul(x[0], x[1])
        elif kind == "div":
            out = div(x[0], exp(x[1]))
        elif kind == "tanh":
            out = tanh(x[0])
        elif kind == "exp":
            out = exp(x[0])
        elif kind == "ln":
            out = ln(softplus(x[0]))
        elif kind == "softplus":
            out = softplus(x[0])
        elif kind == "square":
            out = square(x[0])
        elif kind == "linear":
            out = linear(x[:2], x[2:], x[0])
        else:
            out = total(x)
        pool.append(out)
    return total(pool[len(params):])


@pytest.mark.parametrize("seed", range(8))
def test_gradcheck_random_graph(seed):
    rng = np.random.default_rng(1000 + seed)
    params = [Param(float(v)) for v in rng.uniform(-1.5, 1.5, size=4)]
    program = random_program(seed, len(params), 30)

    tape = Tape()
    run_program(program, params, tape)
    assert len(tape) >= 60
    assert set(ARITY) <= set(tape.kinds)

    assert gradcheck(lambda t: run_program(program, params, t), params) == []


def test_record_block_backward():
    x, y = Param(0.5), Param(-2.0)
    tape = Tape()
    a, b = x.on(tape), y.on(tape)
    # the constant middle input gets no adjoint
    jacobian = np.array([[1.0, 7.0, 2.0], [3.0, 7.0, 0.0], [0.0, 7.0, -1.0]])
    rows = tape.record_block("block", np.array([1.0, 2.0, 3.0]), [a, 4.0, b], jacobian)
    assert [r.value for r in rows] == [1.0, 2.0, 3.0]
    assert tape.kinds[-3:] == ["block"] * 3

    f = mul(rows[0], rows[1]) + square(rows[2]) + exp(a)
    gradients = backward(tape, f)
    # df/drows = (2, 1, 6)
    assert gradients[x] == approx(2 * 1.0 + 1 * 3.0 + 6 * 0.0 + math.exp(0.5))
    assert gradients[y] == approx(2 * 2.0 + 1 * 0.0 + 6 * -1.0)


def test_record_block_only_reaches_used_rows():
    x = Param(1.0)
    tape = Tape()
    jacobian = np.array([[2.0], [5.0]])
    rows = tape.record_block("block", np.array([1.0, 1.0]), [x.on(tape)], jacobian)
    assert backward(tape, rows[0])[x] == 2.0


def test_record_block_validation():
    tape = Tape()
    a = Param(1.0).on(tape)
    with pytest.raises(UsageError):
        tape.record_block("block", np.array([1.0, 2.0]), [a], np.ones((2, 2)))
    with pytest.raises(NonFiniteError):
        tape.record_block("block", np.array([1.0, np.inf]), [a], np.ones((2, 1)))
    with pytest.raises(UsageError):
        foreign = Param(1.0).on(Tape())
        tape.record_block("block", np.array([1.0]), [foreign], np.ones((1, 1)))


def test_gradcheck_reports_mismatches():
    x = Param(0.8)

    def wrong(tape):
        a = x.on(tape)
        if tape is None:
            return 3.0 * a
        return 2.0 * a

    mismatches = gradcheck(wrong, [x])
    assert len(mismatches) == 1
    assert mismatches[0][1:] == (approx(2.0), approx(3.0))


def test_tape_dump(tmp_path):
    x = Param(1.0)
    tape = Tape()
    f = exp(x.on(tape)) + 1.0
    tape.dump_json(tmp_path / "tape.json")
    nodes = json.loads((tmp_path / "tape.json").read_text())["nodes"]
    assert [n["op"] for n in nodes] == ["param", "exp", "add"]
    assert nodes[-1]["inputs"] == [1]
    assert value_of(f) == approx(math.e + 1.0)
