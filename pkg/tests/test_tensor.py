import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atxf import tensor as T
from atxf.errors import ContractError, ShapeError
from conftest import grad_check

OP_TOL = 1e-6


def _r(rng, *shape):
    return rng.standard_normal(shape)


UNARY = {
    "exp": lambda x: T.exp(x),
    "gelu": lambda x: T.gelu(x),
    "neg": lambda x: -x,
    "softmax_last": lambda x: T.softmax(x, axis=-1),
    "softmax_mid": lambda x: T.softmax(x, axis=1),
    "log_softmax": lambda x: T.log_softmax(x, axis=-1),
    "reshape": lambda x: x.reshape(4, 6),
    "transpose": lambda x: x.transpose(2, 0, 1),
    "swapaxes": lambda x: T.swapaxes(x, 0, 2),
    "sum_axis": lambda x: x.sum(axis=1),
    "sum_keep": lambda x: x.sum(axis=-1, keepdims=True),
    "mean_all": lambda x: x.mean(),
    "mean_axis": lambda x: x.mean(axis=(0, 2)),
    "slice": lambda x: x[:, 1:, ::2],
    "int_index": lambda x: x[1],
    "fancy_index": lambda x: x[np.array([0, 1, 0])],
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grad(name, rng):
    assert grad_check(UNARY[name], [_r(rng, 2, 3, 4)]) < OP_TOL


def test_log_grad(rng):
    x = rng.uniform(0.5, 2.0, (3, 4))
    assert grad_check(T.log, [x]) < OP_TOL


BINARY = {
    "add": ((3, 4), (4,), lambda a, b: a + b),
    "sub": ((3, 1), (1, 4), lambda a, b: a - b),
    "mul": ((2, 3, 4), (3, 1), lambda a, b: a * b),
    "div": ((3, 4), (3, 4), lambda a, b: a / (b * b + 1.0)),
    "matmul": ((3, 4), (4, 5), lambda a, b: a @ b),
    "batched_matmul": ((2, 3, 4), (2, 4, 5), lambda a, b: a @ b),
    "broadcast_matmul": ((2, 3, 4), (4, 5), lambda a, b: a @ b),
    "concat": ((2, 3), (2, 5), lambda a, b: T.concat([a, b], axis=1)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_grad(name, rng):
    sa, sb, fn = BINARY[name]
    assert grad_check(fn, [_r(rng, *sa), _r(rng, *sb)]) < OP_TOL


def test_where_grad(rng):
    mask = rng.random((3, 4)) > 0.5
    assert grad_check(lambda a, b: T.where(mask, a, b), [_r(rng, 3, 4), _r(rng, 1, 4)]) < OP_TOL


def test_layernorm_grad(rng):
    fn = lambda x, g, b: T.layernorm(x, g, b)
    assert grad_check(fn, [_r(rng, 2, 3, 6), 1 + 0.1 * _r(rng, 6), _r(rng, 6)]) < OP_TOL


def test_cross_entropy_grad(rng):
    t = T.softmax_array(_r(rng, 4, 5))
    assert grad_check(lambda z: T.cross_entropy_soft(z, t), [_r(rng, 4, 5)]) < OP_TOL


def test_reused_node_accumulates(rng):
    # x feeds two branches; both contributions must add up
    fn = lambda x: T.exp(x) * x + x
    assert grad_check(fn, [_r(rng, 3, 3)]) < OP_TOL


def test_gelu_matches_longdouble_reference():
    from mpmath import mp, mpf, erf, sqrt
    mp.dps = 30
    xs = np.linspace(-6, 6, 25)
    got = T.gelu(T.Tensor(xs)).data
    want = np.array([float(mpf(x) * (1 + erf(mpf(x) / sqrt(2))) / 2) for x in xs])
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-300)


def test_layernorm_output_statistics(rng):
    x = _r(rng, 5, 16) * 3 + 2
    y = T.layernorm(T.Tensor(x), T.Tensor(np.ones(16)), T.Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    var = x.var(axis=-1)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-6), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
              elements=st.floats(-500, 500, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    y = T.softmax(T.Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax_array(x)), y, atol=1e-12)


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(T.Tensor(np.zeros((2, 3))), axis=2)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.Tensor(np.zeros((2, 3))) @ T.Tensor(np.zeros((4, 5)))


def test_cross_entropy_rejects_non_distribution():
    with pytest.raises(ContractError):
        T.cross_entropy_soft(T.Tensor(np.zeros((2, 3))), np.ones((2, 3)))


def test_backward_requires_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_no_graph_without_grad():
    y = T.exp(T.Tensor(np.ones(3))) * 2.0
    assert y.is_leaf and not y.requires_grad


def test_backward_overwrites_or_accumulates():
    x = T.parameter(np.array([1.0, 2.0]))
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])
    (x * 3.0).sum().backward(accumulate=True)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_graph_order_is_topological(rng):
    a, b = T.parameter(_r(rng, 2, 2)), T.parameter(_r(rng, 2, 2))
    loss = (T.exp(a @ b) + a).sum()
    g = T.build_graph(loss)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert {id(r) for r in g.roots} == {id(a), id(b)}
