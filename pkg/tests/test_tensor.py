import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import softmax as sp_softmax

from disa import tensor as T
from disa.gradcheck import numerical_gradient, relative_error
from disa.tensor import Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def vec(n_min=2, n_max=8):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(np.float64, (n,), elements=finite))


# forward values against plain numpy / closed forms

def test_matmul_all_ones():
    out = T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)
    assert np.all(out.data == 3.0)


def test_layer_norm_constant_vector_is_zero():
    # the mean of six copies of 3.7 is off by one ulp; eps keeps the result at ulp scale
    np.testing.assert_allclose(T.layer_norm(Tensor(np.full(6, 3.7))).data, 0.0, atol=1e-12)
    assert np.all(T.layer_norm(Tensor(np.full(6, 2.0))).data == 0.0)


def test_layer_norm_matches_numpy(rng):
    x = rng.normal(size=(3, 7))
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(T.layer_norm(Tensor(x)).data, ref, atol=1e-14)


def test_gelu_fixed_point_and_tanh_form():
    assert T.gelu(Tensor(0.0)).data == 0.0
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, atol=1e-15)


def test_softmax_uniform_and_scalar_value():
    for tau in (0.1, 1.0, 3.0):
        np.testing.assert_allclose(T.softmax(Tensor(np.full(4, 2.5)), temperature=tau).data, 0.25)
    e = math.e
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 0.0])).data, [e / (e + 1), 1 / (e + 1)], atol=1e-4)


def test_softmax_sharpens_as_temperature_drops():
    tops = [T.softmax(Tensor([1.0, 0.0]), temperature=t).data[0] for t in (1.0, 0.1, 0.01)]
    assert tops[0] < tops[1] < tops[2]
    assert tops[2] > 1 - 1e-12


def test_softmax_matches_scipy(rng):
    x = rng.normal(size=(4, 9))
    np.testing.assert_allclose(T.softmax(Tensor(x), axis=-1, temperature=0.07).data,
                               sp_softmax(x / 0.07, axis=-1), atol=1e-14)


def test_softmax_rejects_bad_temperature():
    with pytest.raises(T.DomainError):
        T.softmax(Tensor([1.0, 2.0]), temperature=0.0)


def test_cosine_similarity_cases():
    a = Tensor([0.3, -1.2, 2.0])
    assert T.cosine_similarity(a, a).data == pytest.approx(1.0, abs=1e-15)
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data == 0.0
    assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([-1.0, 0.0])).data == -1.0


def test_cosine_rejects_zero_vector():
    with pytest.raises(T.DomainError):
        T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_kl_closed_forms():
    assert T.kl_divergence(Tensor([0.2, 0.8]), Tensor([0.2, 0.8])).data == 0.0
    assert T.kl_divergence(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).data == pytest.approx(math.log(2), abs=1e-4)


def test_kl_matches_direct_summation(rng):
    for _ in range(20):
        p, q = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
        oracle = 0.0
        for pi, qi in zip(p, q):
            oracle += pi * math.log(pi / qi)
        assert abs(float(T.kl_divergence(Tensor(p), Tensor(q)).data) - oracle) <= 1e-10


def test_embedding_lookup_and_range(rng):
    table = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(T.embedding(Tensor(table), [4, 0, 4]).data, table[[4, 0, 4]])
    with pytest.raises(T.ShapeError):
        T.embedding(Tensor(table), [5])


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# backward

def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    T.backward(T.mul(x, x))
    assert x.grad == 6.0


def test_cosine_gradient_vanishes_at_maximum():
    a = Tensor([0.5, -1.0, 2.0], requires_grad=True)
    T.backward(T.cosine_similarity(a, Tensor([0.5, -1.0, 2.0])))
    np.testing.assert_allclose(a.grad, 0.0, atol=1e-15)


def test_second_backward_is_rejected():
    x = Tensor(2.0, requires_grad=True)
    y = T.mul(x, x)
    T.backward(y)
    with pytest.raises(RuntimeError):
        T.backward(y)


def test_frozen_tensor_never_accumulates():
    w = Tensor(np.ones(3))
    x = Tensor(np.arange(3.0), requires_grad=True)
    T.backward(T.sum_(T.mul(w, x)))
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_shared_leaf_accumulates_over_paths():
    x = Tensor(1.5, requires_grad=True)
    T.backward(T.add(T.mul(x, x), T.scale(x, 3.0)))
    assert x.grad == pytest.approx(2 * 1.5 + 3.0)


def test_broadcast_gradient_is_summed():
    b = Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.sum_(T.add(Tensor(np.ones((4, 3))), b)))
    np.testing.assert_array_equal(b.grad, np.full(3, 4.0))


def test_no_grad_records_nothing():
    x = Tensor(2.0, requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_gradient_shape_equals_value_shape(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.backward(T.mean(T.gelu(x)))
    assert x.grad.shape == x.shape


def test_checksum_is_order_and_bit_sensitive():
    a, b = np.arange(3.0), np.ones(2)
    base = T.parameters_checksum([a, b])
    assert base == T.parameters_checksum([a.copy(), b.copy()])
    assert base != T.parameters_checksum([b, a])
    a2 = a.copy()
    a2[0] = np.nextafter(a2[0], 1)
    assert base != T.parameters_checksum([a2, b])


# properties

@settings(max_examples=60, deadline=None)
@given(vec(), st.floats(-50, 50), st.floats(0.05, 5))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c, tau):
    y = T.softmax(Tensor(x), temperature=tau).data
    assert abs(y.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(T.softmax(Tensor(x + c), temperature=tau).data, y, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(vec(), vec())
def test_kl_non_negative_and_zero_on_self(a, b):
    n = min(len(a), len(b))
    p, q = sp_softmax(a[:n]), sp_softmax(b[:n])
    assert T.kl_divergence(Tensor(p), Tensor(q)).data >= 0.0
    assert T.kl_divergence(Tensor(p), Tensor(p)).data == 0.0


@settings(max_examples=60, deadline=None)
@given(vec(3, 8))
def test_cosine_bounded(x):
    if np.linalg.norm(x) < 1e-3:
        return
    y = x[::-1] + 0.1
    c = float(T.cosine_similarity(Tensor(x), Tensor(y)).data)
    assert -1 - 1e-12 <= c <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_forward_is_deterministic(x):
    f = lambda: T.layer_norm(T.gelu(Tensor(x))).data
    assert f().tobytes() == f().tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-2, 2)))
def test_softmax_gradient_matches_finite_differences(x):
    w = np.linspace(-1, 1, 10).reshape(2, 5)
    fn = lambda t: T.sum_(T.mul(T.softmax(t[0], axis=-1, temperature=0.5), Tensor(w)))
    x_t = Tensor(x, requires_grad=True)
    T.backward(fn([x_t]))
    assert relative_error([x_t.grad], numerical_gradient(fn, [x])) <= 1e-4
