import math

import numpy as np
import pytest

from mm_align.adl import GRU
from mm_align.common import (
    DimensionError,
    EmptySupportError,
    NumericalError,
)
from mm_align.layers import FeedForward, LayerNorm, Linear
from mm_align.numerics import (
    GradPair,
    Module,
    gelu,
    gelu_grad,
    grad_check,
    layer_norm,
    masked_softmax,
    matmul,
    sigmoid,
    softmax_row,
)
from tests.utils_for_tests import naive_matmul


def test_matmul_trivial_cases():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(
        matmul(np.array([[1.0, 0.0]]), np.array([[5.0], [7.0]])),
        np.array([[5.0]]),
    )


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) <= 1e-12


def test_matmul_is_associative(rng):
    a, b, c = (rng.standard_normal((5, 5)) for _ in range(3))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_trivial_cases():
    assert np.allclose(softmax_row(np.zeros(3)), [1 / 3] * 3)
    assert np.array_equal(
        softmax_row(
            np.array([0.7, 123.0, 0.7]), np.array([True, False, True])
        ),
        [0.5, 0.0, 0.5],
    )


def test_softmax_against_extended_precision():
    x = np.array([1.0, 2.0, 3.0], dtype=np.longdouble)
    expected = np.exp(x) / np.exp(x).sum()
    result = softmax_row(np.array([1.0, 2.0, 3.0]))
    assert np.max(np.abs(result - expected.astype(np.float64))) <= 1e-15


def test_softmax_is_a_distribution_for_extreme_inputs(rng):
    x = rng.standard_normal((10, 6)) * 1e3
    probs = masked_softmax(x)
    assert (probs >= 0).all()
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_softmax_fully_masked_row():
    with pytest.raises(EmptySupportError):
        softmax_row(np.ones(3), np.zeros(3, dtype=bool))


def test_layer_norm_trivial_cases():
    ones, zeros = np.ones(4), np.zeros(4)
    assert np.array_equal(layer_norm(np.full(4, 3.5), ones, zeros), zeros)
    assert np.allclose(
        layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), 1e-14),
        [1.0, -1.0],
        atol=1e-10,
    )


def test_layer_norm_against_scalar_oracle(rng):
    v = rng.standard_normal(8)
    gain = rng.standard_normal(8)
    bias = rng.standard_normal(8)
    eps = 1e-5
    mean = math.fsum(v) / 8
    var = math.fsum((x - mean) ** 2 for x in v) / 8
    expected = [
        (x - mean) / math.sqrt(var + eps) * g + b
        for x, g, b in zip(v, gain, bias)
    ]
    assert np.max(np.abs(layer_norm(v, gain, bias, eps) - expected)) <= 1e-10


def test_layer_norm_is_shift_invariant(rng):
    v = rng.standard_normal(8)
    gain, bias = rng.standard_normal(8), rng.standard_normal(8)
    assert np.allclose(
        layer_norm(v, gain, bias),
        layer_norm(v + 17.0, gain, bias),
        atol=1e-8,
        rtol=0,
    )


def test_layer_norm_dimension_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(np.ones(3), np.ones(4), np.zeros(4))


def test_sigmoid_does_not_overflow():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.array_equal(out, [0.0, 0.5, 1.0])


def test_gelu_grad_matches_central_differences():
    x = np.linspace(-3, 3, 13)
    h = 1e-6
    numeric = (gelu(x + h) - gelu(x - h)) / (2 * h)
    assert np.allclose(gelu_grad(x), numeric, atol=1e-8)


def test_grad_pair_accumulates():
    pair = GradPair.zeros_like(np.ones(3))
    pair.accumulate(np.array([1.0, 2.0, 3.0]))
    pair.accumulate(np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(pair.grad, [2.0, 4.0, 6.0])
    pair.zero_grad()
    assert not pair.grad.any()
    with pytest.raises(DimensionError):
        GradPair(np.ones(3), np.ones(2))
    with pytest.raises(DimensionError):
        pair.accumulate(np.ones((3, 1)))


class _Identity(Module):
    def forward(self, x):
        return x, None

    def backward(self, d_out, cache):
        return d_out, {}


class _NanLinear(Linear):
    def backward(self, d_y, x):
        d_x, grads = super().backward(d_y, x)
        grads["weight"] = grads["weight"] * np.nan
        return d_x, grads


def test_grad_check_linear(rng):
    layer = Linear(rng, 3, 4)
    error = grad_check(layer, rng.standard_normal((5, 3)), check_input=True)
    assert error < 1e-4


def test_grad_check_layer_norm(rng):
    layer = LayerNorm(6)
    layer.gain[...] = rng.standard_normal(6)
    assert grad_check(layer, rng.standard_normal((4, 6))) < 1e-4


def test_grad_check_feed_forward(rng):
    layer = FeedForward(rng, 4, 6)
    error = grad_check(layer, rng.standard_normal((2, 3, 4)), check_input=True)
    assert error < 1e-4


def test_grad_check_gru(rng):
    layer = GRU(rng, 4, 4)
    error = grad_check(layer, rng.standard_normal((2, 5, 4)), check_input=True)
    assert error < 1e-4


def test_grad_check_zero_parameter_layer(rng):
    assert grad_check(_Identity(), rng.standard_normal(3)) == 0.0


def test_grad_check_reports_non_finite_gradient(rng):
    with pytest.raises(NumericalError) as exc_info:
        grad_check(_NanLinear(rng, 2, 2), rng.standard_normal((3, 2)))
    assert exc_info.value.parameter == "weight"


@pytest.mark.parametrize("epsilon", [0.0, 1e-2])
def test_grad_check_rejects_bad_epsilon(rng, epsilon):
    with pytest.raises(ValueError):
        grad_check(Linear(rng, 2, 2), np.ones((1, 2)), epsilon=epsilon)
