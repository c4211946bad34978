import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aulacaps import autodiff as ad
from aulacaps.autodiff import ShapeError, Tensor


def grad_of(fn, *values):
    ts = [Tensor(v, requires_grad=True, dtype=np.float64) for v in values]
    with ad.use_tape(ad.Tape()):
        ad.backward(fn(*ts))
    return [t.grad for t in ts]


def numeric(fn, values, k, eps=1e-6):
    def f(x):
        args = [Tensor(x if i == k else v, dtype=np.float64) for i, v in enumerate(values)]
        with ad.no_grad():
            return fn(*args).item()

    return ad.finite_difference_grad(f, values[k], eps)


def test_elementwise_examples():
    assert np.array_equal(ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    x = Tensor([3.0])
    assert np.array_equal(ad.mul(x, x).data, [9])
    assert ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 5)))], axis=1).shape == (2, 8)


def test_backward_examples():
    (g,) = grad_of(lambda x: ad.tsum(x * x), np.array([3.0]))
    assert g[0] == 6.0
    gx, gy = grad_of(lambda x, y: ad.tsum(x * y), np.array([2.0]), np.array([5.0]))
    assert (gx[0], gy[0]) == (5.0, 2.0)
    (g,) = grad_of(lambda x: ad.tsum(ad.tanh(2 * x)), np.array([0.0]))
    assert g[0] == pytest.approx(2.0)


def test_finite_difference_examples():
    g = ad.finite_difference_grad(lambda x: float((x**2).sum()), np.array([1.0, 2.0]), 1e-4)
    np.testing.assert_allclose(g, [2.0, 4.0], rtol=1e-8)
    g = ad.finite_difference_grad(
        lambda x: ad.tsum(ad.leaky_relu(Tensor(x, dtype=np.float64), 0.2)).item(), np.array([-1.0]), 1e-4
    )
    np.testing.assert_allclose(g, [0.2], rtol=1e-8)


@pytest.mark.parametrize("eps", [1e-7, 0.1])
def test_finite_difference_rejects_eps(eps):
    with pytest.raises(ValueError):
        ad.finite_difference_grad(lambda x: 0.0, np.zeros(1), eps)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.use_tape(ad.Tape()):
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(x * 2)


def test_backward_rejects_constant_loss():
    with pytest.raises(ValueError):
        ad.backward(Tensor(1.0))


def test_tape_is_reset_and_data_untouched():
    tape = ad.Tape()
    x0 = np.array([0.3, -0.7], dtype=np.float32)
    x = Tensor(x0.copy(), requires_grad=True)
    with ad.use_tape(tape):
        y = ad.tsum(ad.exp(x) * x)
        assert len(tape) > 0
        ad.backward(y)
    assert len(tape) == 0
    assert np.array_equal(x.data, x0)


def test_discarded_tape_leaves_data_identical():
    x = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
    before = x.data.copy()
    with ad.use_tape(ad.Tape()):
        ad.tsum(ad.tanh(x) * x)
    assert np.array_equal(x.data, before)


def test_no_grad_records_nothing():
    tape = ad.Tape()
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.use_tape(tape), ad.no_grad():
        y = x * 3
    assert len(tape) == 0 and not y.requires_grad


def test_float32_default_and_float64_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.array([1.0])).dtype == np.float64


def test_shape_error_names_op():
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_broadcast_gradient_unbroadcasts():
    gx, gb = grad_of(lambda x, b: ad.tsum(x + b), np.ones((3, 4)), np.ones((4,)))
    assert gb.shape == (4,) and np.all(gb == 3)


def test_linearity_of_backward():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (4,))
    f1 = lambda t: ad.tsum(ad.tanh(t))  # noqa: E731
    f2 = lambda t: ad.tsum(t * t * t)  # noqa: E731
    (g_sum,) = grad_of(lambda t: f1(t) + f2(t), x)
    (g1,) = grad_of(f1, x)
    (g2,) = grad_of(f2, x)
    np.testing.assert_allclose(g_sum, g1 + g2, rtol=1e-12)


def test_reused_tensor_accumulates():
    (g,) = grad_of(lambda x: ad.tsum(x * 2 + x * 3), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(g, [5.0, 5.0])


UNARY = {
    "exp": ad.exp,
    "log": lambda t: ad.log(t * t + 1.5),
    "sqrt": lambda t: ad.sqrt(t * t + 0.5),
    "tanh": ad.tanh,
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "neg": ad.neg,
    "power": lambda t: ad.power(t * t + 1.0, 1.5),
    "clip_min": lambda t: ad.clip_min(t, 0.1),
    "mean": lambda t: ad.mean(t, axis=0),
    "reshape": lambda t: ad.reshape(t, (-1,)),
    "transpose": lambda t: ad.transpose(t),
    "getitem": lambda t: t[1:, ::2],
    "stack": lambda t: ad.stack([t, t * 2], axis=1),
    "div": lambda t: t / (t * t + 2.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.uniform(-1, 1, (3, 4))
    op = UNARY[name]
    r = rng.standard_normal(op(Tensor(x, dtype=np.float64)).shape)
    fn = lambda t: ad.tsum(op(t) * Tensor(r, dtype=np.float64))  # noqa: E731
    (g,) = grad_of(fn, x)
    assert ad.relative_error(g, numeric(fn, [x], 0)) < 1e-4


@pytest.mark.parametrize(
    "subscripts,sa,sb",
    [("ij,jk->ik", (3, 4), (4, 2)), ("bik,ijdk->bijd", (2, 3, 4), (3, 2, 5, 4)), ("bij,bijd->bjd", (2, 3, 4), (2, 3, 4, 5))],
)
def test_einsum_and_matmul_gradients(subscripts, sa, sb):
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1, 1, sa), rng.uniform(-1, 1, sb)
    out_shape = np.einsum(subscripts, a, b).shape
    r = rng.standard_normal(out_shape)
    fn = lambda x, y: ad.tsum(ad.einsum(subscripts, x, y) * Tensor(r, dtype=np.float64))  # noqa: E731
    ga, gb = grad_of(fn, a, b)
    assert ad.relative_error(ga, numeric(fn, [a, b], 0)) < 1e-4
    assert ad.relative_error(gb, numeric(fn, [a, b], 1)) < 1e-4


def test_matmul_gradient():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 5))
    fn = lambda x, y: ad.tsum(ad.tanh(x @ y))  # noqa: E731
    ga, gb = grad_of(fn, a, b)
    assert ad.relative_error(ga, numeric(fn, [a, b], 0)) < 1e-4
    assert ad.relative_error(gb, numeric(fn, [a, b], 1)) < 1e-4


def test_guided_leaky_relu_passes_only_positive_signal():
    x = Tensor(np.array([-1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)
    g = Tensor(np.array([1.0, 1.0, -1.0]), dtype=np.float64)
    with ad.use_tape(ad.Tape()), ad.guided_rectifiers():
        ad.backward(ad.tsum(ad.leaky_relu(x) * g))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_relative_error_conventions():
    assert ad.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert ad.relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert ad.relative_error(np.array([0.0]), np.array([1e-12]), floor=1e-6) == pytest.approx(1e-6)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-1, 1)),
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-1, 1)),
)
def test_product_rule_property(a, b):
    b = np.resize(b, a.shape)
    ga, gb = grad_of(lambda x, y: ad.tsum(x * y), a, b)
    np.testing.assert_array_equal(ga, b)
    np.testing.assert_array_equal(gb, a)
