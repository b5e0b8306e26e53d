import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from dintr import numerics as nx
from dintr.numerics import Tensor

SEEDS = range(20)


def _leaf(rng, shape, positive=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _gradcheck(build, leaves):
    """Analytic gradient of sum(build() * weights) vs central differences."""
    with nx.Tape():
        out = build()
    w = np.random.default_rng(99).standard_normal(out.shape)

    def value():
        return float(np.sum(build().data * w))

    with nx.Tape():
        loss = nx.sum(nx.mul(build(), Tensor(w)))
        for x in leaves:
            x.grad = None
        nx.backward(loss)
    return max(nx.rel_error(x.grad, nx.numeric_grad(value, x)) for x in leaves)


UNARY = {
    "sqrt": (nx.sqrt, True),
    "exp": (nx.exp, False),
    "log": (nx.log, True),
    "reciprocal": (nx.reciprocal, True),
    "tanh": (nx.tanh, False),
    "gelu": (nx.gelu, False),
    "scale": (lambda a: nx.scale(a, -1.7), False),
    "add_scalar": (lambda a: nx.add_scalar(a, 0.3), False),
    "transpose": (nx.transpose, False),
    "softmax_rows": (lambda a: nx.softmax_rows(a, 0.8), False),
    "sum_all": (lambda a: nx.sum(a), False),
    "sum_axis0": (lambda a: nx.sum(a, axis=0), False),
    "mean_axis1": (lambda a: nx.mean(a, axis=1), False),
    "reshape": (lambda a: nx.reshape(a, (2, 6)), False),
    "slice": (lambda a: nx.slice(a, 1, 3, axis=1), False),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, seed):
    fn, positive = UNARY[name]
    rng = np.random.default_rng(seed)
    a = _leaf(rng, (3, 4), positive)
    assert _gradcheck(lambda: fn(a), [a]) <= 1e-4


BINARY = {
    "add": (nx.add, (3, 4), (3, 4)),
    "sub": (nx.sub, (3, 4), (3, 4)),
    "mul": (nx.mul, (3, 4), (3, 4)),
    "matmul": (nx.matmul, (3, 4), (4, 2)),
    "concat0": (lambda a, b: nx.concat([a, b], axis=0), (3, 4), (2, 4)),
    "concat1": (lambda a, b: nx.concat([a, b], axis=1), (3, 4), (3, 2)),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name, seed):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, sa), _leaf(rng, sb)
    assert _gradcheck(lambda: fn(a, b), [a, b]) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_split_gradient(seed):
    rng = np.random.default_rng(seed)
    a = _leaf(rng, (5, 3))
    assert _gradcheck(lambda: nx.concat(nx.split(a, [2, 3])[::-1], axis=0), [a]) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_two_layer_net_gradient(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 3)))
    w1, w2 = _leaf(rng, (3, 5)), _leaf(rng, (5, 2))
    assert _gradcheck(lambda: nx.tanh(x @ w1) @ w2, [w1, w2]) <= 1e-4


def test_matmul_examples():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal((a @ b).data, b.data)
    np.testing.assert_array_equal((Tensor([[1.0, 0.0]]) @ Tensor([[2.0], [5.0]])).data, [[2.0]])


def test_matmul_matches_exact_triple_loop(rng):
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    got = (Tensor(a) @ Tensor(b)).data
    for i, j in itertools.product(range(3), range(3)):
        exact = sum(Fraction(a[i, l]) * Fraction(b[l, j]) for l in range(3))
        assert got[i, j] == pytest.approx(float(exact), rel=1e-14, abs=1e-15)


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=1e-15)
    big = nx.softmax_rows(Tensor([[1000.0, 0.0]]), 1.0).data
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300


def test_softmax_matches_high_precision():
    e = [math.exp(v) for v in (1, 2, 3)]
    want = [x / math.fsum(e) for x in e]
    got = nx.softmax_rows(Tensor([[1.0, 2.0, 3.0]]), 1.0).data[0]
    np.testing.assert_allclose(got, want, rtol=1e-14)


def test_softmax_contract_errors():
    with pytest.raises(nx.ContractError):
        nx.softmax_rows(Tensor([[1.0, 2.0]]), 0.0)
    with pytest.raises(nx.NumericError):
        nx.softmax_rows(Tensor([[np.nan, 2.0]]))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-50, 50)),
       st.floats(0.01, 10))
def test_softmax_rows_are_stochastic(a, scale):
    out = nx.softmax_rows(Tensor(a), scale).data
    assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-12)
    assert np.all(out >= 0) and np.all(out <= 1)


def test_backward_linear_and_quadratic(rng):
    x = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
    with nx.Tape():
        nx.backward(nx.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 2)))
    y = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    with nx.Tape():
        nx.backward(nx.scale(nx.sum(nx.mul(y, y)), 0.5))
    np.testing.assert_allclose(y.grad, y.data, rtol=1e-15)


def test_backward_contracts(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with nx.Tape():
        y = nx.mul(x, x)
        with pytest.raises(nx.ContractError):
            nx.backward(y)
    with pytest.raises(nx.ContractError):
        nx.backward(nx.sum(x))  # no tape was active


def test_tape_records_only_when_needed(rng):
    a = Tensor(rng.standard_normal((2, 2)))
    with nx.Tape() as tape:
        nx.mul(a, a)
        assert len(tape.entries) == 0
        b = Tensor(a.data, requires_grad=True)
        nx.mul(b, b)
        assert len(tape.entries) == 1
    c = nx.mul(b, b)  # no active tape
    assert c._tape is None


def test_tape_order_is_topological(rng):
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    with nx.Tape() as tape:
        y = nx.exp(nx.mul(x, x) @ x)
        loss = nx.sum(y)
    for i, (_, parents, _) in enumerate(tape.entries):
        assert all(p._index < i for p in parents if p._tape is tape)
    assert loss._index == len(tape.entries) - 1


def test_ops_are_pure(rng):
    a = rng.standard_normal((5, 5))
    outs = [nx.softmax_rows(nx.gelu(Tensor(a) @ Tensor(a)), 0.3).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 4))
def test_concat_split_identity(sizes, cols):
    a = Tensor(np.arange(sum(sizes) * cols, dtype=float).reshape(sum(sizes), cols))
    back = nx.concat(nx.split(a, sizes, axis=0), axis=0)
    np.testing.assert_array_equal(back.data, a.data)


def test_no_broadcasting_beyond_scalars():
    with pytest.raises(nx.ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))


def test_dtnr_round_trip_and_layout(tmp_path, rng):
    arr = rng.standard_normal((3, 2, 4))
    path = tmp_path / "t.dtnr"
    nx.save_dtnr(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"DTNR" and raw[4:8] == bytes([1, 0, 3, 0])
    assert np.frombuffer(raw[8:32], "<u8").tolist() == [3, 2, 4]
    assert len(raw) == 32 + arr.size * 8
    np.testing.assert_array_equal(nx.load_dtnr(path), arr)


def test_dtnr_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.dtnr"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        nx.load_dtnr(p)
