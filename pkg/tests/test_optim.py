"""Optimizer and finite-difference checker against scalar references."""

import numpy as np
import pytest

from flowcast.errors import ContractError
from flowcast.optim import (
    AdamState,
    adam_step,
    clip_global_norm,
    finite_diff_check,
    glorot_uniform,
    global_grad_norm,
    ones_param,
    zero_gradients,
    zeros_param,
)
from flowcast.tensor import Param, Tensor, backward, constant, mul, tensor_sum

from oracles import adam_reference


def test_first_adam_step_moves_by_learning_rate():
    # With bias correction the very first update is lr * g / (|g| + eps).
    p = Param(np.array([10.0]), "p")
    p.grad[...] = 3.0
    state = AdamState(learning_rate=0.01)
    adam_step(state, [p])
    assert abs((10.0 - float(p.data[0])) - 0.01) < 1e-9


def test_adam_zero_grad_leaves_param_unchanged():
    p = Param(np.array([1.0, 2.0]), "p")
    state = AdamState(learning_rate=0.5)
    adam_step(state, [p])
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_matches_scalar_reference_over_fifty_steps():
    # Minimize x^2 from x0 = 1 and compare against a plain-python trace.
    p = Param(np.array(1.0), "x")
    state = AdamState(learning_rate=0.1)
    seen = []
    for _ in range(50):
        backward(tensor_sum(mul(p, p)))
        adam_step(state, [p])
        seen.append(float(p.data))
    expected = adam_reference(lambda x: 2.0 * x, 1.0, 0.1, 50)
    assert np.allclose(seen, expected, atol=1e-12)


def test_adam_zeroes_gradients_after_step():
    p = Param(np.ones(3), "p")
    p.grad[...] = 5.0
    adam_step(AdamState(learning_rate=0.1), [p])
    assert np.array_equal(p.grad, np.zeros(3))


def test_adam_state_persists_per_name():
    p = Param(np.array(0.0), "p")
    state = AdamState(learning_rate=0.1)
    p.grad[...] = 1.0
    adam_step(state, [p])
    assert state.step_count == 1
    assert "p" in state.slots
    m, v = state.slots["p"]
    assert abs(float(m) - 0.1) < 1e-15
    assert abs(float(v) - 0.001) < 1e-15


def test_adam_slot_shape_mismatch_raises():
    state = AdamState(learning_rate=0.1)
    state.slots["p"] = (np.zeros(2), np.zeros(2))
    with pytest.raises(ContractError):
        adam_step(state, [Param(np.zeros(3), "p")])


def test_global_norm_and_clip():
    a = Param(np.zeros(2), "a")
    b = Param(np.zeros(1), "b")
    a.grad[...] = [3.0, 0.0]
    b.grad[...] = [4.0]
    assert abs(global_grad_norm([a, b]) - 5.0) < 1e-12
    pre = clip_global_norm([a, b], 2.5)
    assert abs(pre - 5.0) < 1e-12
    assert abs(global_grad_norm([a, b]) - 2.5) < 1e-12
    assert np.allclose(a.grad, [1.5, 0.0], atol=1e-12)


def test_clip_below_threshold_is_identity():
    a = Param(np.zeros(2), "a")
    a.grad[...] = [0.3, 0.4]
    pre = clip_global_norm([a], 5.0)
    assert abs(pre - 0.5) < 1e-12
    assert np.allclose(a.grad, [0.3, 0.4], atol=1e-15)


def test_zero_gradients():
    a = Param(np.zeros((2, 2)), "a")
    a.grad[...] = 7.0
    zero_gradients([a])
    assert np.array_equal(a.grad, np.zeros((2, 2)))


def test_glorot_bounds_and_determinism():
    shape = (40, 60)
    limit = np.sqrt(6.0 / 100.0)
    p1 = glorot_uniform(np.random.default_rng(9), shape, "w")
    p2 = glorot_uniform(np.random.default_rng(9), shape, "w")
    assert np.array_equal(p1.data, p2.data)
    assert p1.data.max() <= limit and p1.data.min() >= -limit
    # With 2400 draws the occupied range should come close to the bounds.
    assert p1.data.max() > 0.9 * limit and p1.data.min() < -0.9 * limit


def test_glorot_rejects_vector_shape():
    with pytest.raises(ContractError):
        glorot_uniform(np.random.default_rng(0), (5,), "w")


def test_zeros_and_ones_params():
    z = zeros_param((2, 3), "z")
    o = ones_param((4,), "o")
    assert np.array_equal(z.data, np.zeros((2, 3)))
    assert np.array_equal(o.data, np.ones(4))
    assert z.name == "z" and o.name == "o"


def test_finite_diff_on_linear_function_is_tight():
    # Central differences are exact for linear maps up to rounding.
    c = np.random.default_rng(10).normal(size=(3, 4))
    x = Param(np.random.default_rng(11).normal(size=(3, 4)), "x")

    def make_loss():
        return tensor_sum(mul(x, constant(c)))

    assert finite_diff_check(make_loss, [x], samples=12, seed=4) < 1e-9


def test_finite_diff_catches_wrong_gradient():
    # An op whose backward is off by a factor of two must be flagged.
    x = Param(np.array([1.0, 2.0]), "x")

    def bad_double(a: Tensor) -> Tensor:
        out = Tensor(a.data * 2.0, (a,))

        def bwd(g):
            a.grad += g  # wrong: should be 2 * g

        out.backward_fn = bwd
        return out

    def make_loss():
        return tensor_sum(bad_double(x))

    assert finite_diff_check(make_loss, [x], samples=2, seed=5) > 0.4


def test_finite_diff_restores_parameters():
    x = Param(np.array([1.0, -1.0]), "x")
    before = x.data.copy()

    def make_loss():
        return tensor_sum(mul(x, x))

    finite_diff_check(make_loss, [x], samples=2, seed=6)
    assert np.array_equal(x.data, before)
