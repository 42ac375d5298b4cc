"""Tests for the autodiff tensor and numeric primitives."""

import math

import numpy as np
import pytest

from mci_probe.errors import ConfigError, GraphError, LabelError, NonFiniteError, ShapeError
from mci_probe.numerics import (
    Tensor,
    concat,
    cross_entropy,
    gradient_check,
    layer_norm,
    log_softmax,
    parameter,
    softmax,
    stack,
)


def test_softmax_rows_sum_to_one():
    out = softmax(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data.sum(axis=-1), [1.0, 1.0])
    np.testing.assert_allclose(out.data[1], [1 / 3, 1 / 3, 1 / 3])


def test_softmax_is_shift_stable():
    out = softmax([1000.0, 1001.0])
    np.testing.assert_allclose(out.data, [1 / (1 + math.e), math.e / (1 + math.e)])


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        softmax([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        softmax([1.0, float("inf")])


def test_softmax_sums_to_one_on_random_inputs(rng):
    x = rng.uniform(-50.0, 50.0, size=(200, 7))
    out = softmax(x).data
    assert np.all(out >= 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(4, 5))
    np.testing.assert_allclose(log_softmax(x).data, np.log(softmax(x).data), atol=1e-12)


def test_layer_norm_normalizes_last_axis(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(6, 8))
    out = layer_norm(x, np.ones(8), np.zeros(8), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_without_eps():
    np.testing.assert_allclose(layer_norm([3.0, 5.0], [2.0, 2.0], [1.0, 1.0], eps=0.0).data, [-1.0, 3.0])
    # a constant row has no spread to normalize
    np.testing.assert_array_equal(layer_norm([2.0, 2.0], [1.0, 1.0], [0.0, 0.0], eps=0.0).data, [0.0, 0.0])
    np.testing.assert_array_equal(layer_norm([[4.0, 4.0, 4.0]], np.ones(3), np.full(3, 0.5), eps=0.0).data,
                                  [[0.5, 0.5, 0.5]])


def test_layer_norm_constant_row_has_finite_gradient():
    x = parameter(np.array([[2.0, 2.0, 2.0], [1.0, 2.0, 4.0]]))
    gamma = parameter(np.ones(3))
    (layer_norm(x, gamma, np.zeros(3), eps=0.0) * np.arange(6.0).reshape(2, 3)).sum().backward()
    assert np.all(np.isfinite(x.grad))
    np.testing.assert_array_equal(x.grad[0], 0.0)
    assert np.all(np.isfinite(gamma.grad))


def test_gradient_check_layer_norm_without_eps(rng):
    x = parameter(rng.normal(size=(3, 6)))
    gamma = parameter(1.0 + 0.1 * rng.normal(size=6))
    weights = rng.normal(size=(3, 6))

    def loss():
        return (layer_norm(x, gamma, np.zeros(6), eps=0.0) * weights).sum()

    assert gradient_check(loss, [x, gamma], n_coords=12) < 1e-4


def test_layer_norm_rejects_bad_gamma_and_eps():
    with pytest.raises(ShapeError):
        layer_norm(np.ones((2, 4)), np.ones(3), np.zeros(4))
    with pytest.raises(ConfigError, match="eps"):
        layer_norm(np.ones((2, 4)), np.ones(4), np.zeros(4), eps=-1.0)


def test_cross_entropy_single_and_batch():
    assert cross_entropy([0.0, 0.0], 1).item() == pytest.approx(math.log(2))
    logits = np.array([[10.0, 0.0], [0.0, 10.0]])
    assert cross_entropy(logits, [0, 1]).item() == pytest.approx(math.log(1 + math.exp(-10)))


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(LabelError):
        cross_entropy([0.0, 0.0, 0.0], 3)
    with pytest.raises(LabelError):
        cross_entropy(np.zeros((2, 3)), [0, -1])


def test_backward_through_matmul_and_broadcast():
    w = parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = parameter(np.array([0.5, -0.5]))
    x = Tensor(np.array([[1.0, 1.0], [2.0, 0.0]]))
    loss = (x @ w + b).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, x.data.T @ np.ones((2, 2)))
    np.testing.assert_allclose(b.grad, [2.0, 2.0])


def test_backward_accumulates_shared_parents():
    a = parameter(np.array(3.0))
    (a * a + a).backward()
    assert a.grad == pytest.approx(7.0)


def test_second_backward_is_rejected():
    a = parameter(np.array([1.0, 2.0]))
    loss = (a * a).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_needs_scalar_root():
    a = parameter(np.ones(3))
    with pytest.raises(GraphError):
        (a * 2.0).backward()


def test_concat_and_stack_route_gradients():
    a, b = parameter(np.ones((2, 3))), parameter(np.ones((1, 3)))
    (concat([a, b], axis=0) * np.arange(9.0).reshape(3, 3)).sum().backward()
    np.testing.assert_allclose(b.grad, [[6.0, 7.0, 8.0]])
    c, d = parameter(np.zeros(2)), parameter(np.zeros(2))
    out = stack([c, d], axis=0)
    assert out.shape == (2, 2)
    (out * np.array([[1.0, 2.0], [3.0, 4.0]])).sum().backward()
    np.testing.assert_allclose(d.grad, [3.0, 4.0])


def test_numpy_on_the_left_defers_to_tensor():
    a = parameter(np.ones(2))
    out = np.array([2.0, 3.0]) * a
    assert isinstance(out, Tensor)
    out.sum().backward()
    np.testing.assert_allclose(a.grad, [2.0, 3.0])


def test_gradient_check_composite_graph(rng):
    w = parameter(rng.normal(size=(5, 3)))
    gamma = parameter(1.0 + 0.1 * rng.normal(size=5))
    beta = parameter(0.1 * rng.normal(size=5))
    x = rng.normal(size=(4, 5))
    labels = np.array([0, 1, 2, 1])

    def loss():
        h = layer_norm(x, gamma, beta).gelu().tanh() / 2.0 + layer_norm(x, gamma, beta).sigmoid()
        return cross_entropy(h @ w, labels)

    assert gradient_check(loss, [w, gamma, beta], n_coords=20) < 1e-4


def test_gradient_check_swapaxes_and_softmax(rng):
    q = parameter(rng.normal(size=(2, 1, 4)))
    k = rng.normal(size=(2, 6, 4))

    def loss():
        scores = softmax(q @ Tensor(k).swapaxes(-1, -2), axis=-1)
        return (scores @ Tensor(k)).mean() ** 2

    assert gradient_check(loss, [q], n_coords=8) < 1e-4
