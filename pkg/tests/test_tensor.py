"""Autodiff core: forward values against naive oracles, gradients against
closed forms and central differences."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowcast.errors import ContractError, NumericError
from flowcast.optim import finite_diff_check, zero_gradients
from flowcast.tensor import (
    Param,
    Tensor,
    absolute,
    add,
    backward,
    concat,
    constant,
    gather_rows,
    layer_norm,
    log,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    scatter_rows,
    softmax_rows,
    sub,
    tensor_sum,
    transpose,
)

from oracles import layer_norm_naive, matmul_oracle, softmax_naive


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_matmul_small_known():
    a = constant([[1.0, 2.0], [3.0, 4.0]])
    b = constant([[5.0, 6.0], [7.0, 8.0]])
    out = matmul(a, b)
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 5))
    out = matmul(constant(x), constant(np.eye(5)))
    assert np.allclose(out.data, x, atol=1e-15)


@pytest.mark.parametrize(
    "sa,sb",
    [
        ((3, 4), (4, 5)),
        ((2, 3, 4), (4, 5)),
        ((3, 4), (2, 4, 5)),
        ((2, 1, 3, 4), (1, 5, 4, 2)),
    ],
)
def test_matmul_matches_triple_loop(sa, sb):
    rng = np.random.default_rng(hash((sa, sb)) % 2**32)
    a = rng.normal(size=sa)
    b = rng.normal(size=sb)
    out = matmul(constant(a), constant(b))
    expect = matmul_oracle(a, b)
    assert out.shape == expect.shape
    assert np.allclose(out.data, expect, atol=1e-12)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ContractError):
        matmul(constant(np.ones((2, 3))), constant(np.ones((4, 2))))
    with pytest.raises(ContractError):
        matmul(constant(np.ones(3)), constant(np.ones((3, 2))))


def test_softmax_matches_naive_on_moderate_values():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 9)) * 3.0
    out = softmax_rows(constant(x))
    assert np.allclose(out.data, softmax_naive(x), atol=1e-12)


def test_softmax_uniform_on_constant_rows():
    out = softmax_rows(constant(np.full((3, 4), 7.5)))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_stable_at_large_magnitudes():
    out = softmax_rows(constant([[1000.0, 0.0], [-1000.0, -999.0]]))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data[0], [1.0, 0.0], atol=1e-300)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


@given(
    st.lists(st.floats(-30, 30), min_size=2, max_size=8),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance(row, shift):
    base = softmax_rows(constant([row])).data
    shifted = softmax_rows(constant([[v + shift for v in row]])).data
    assert np.allclose(base, shifted, atol=1e-9)
    assert abs(base.sum() - 1.0) < 1e-12


def test_layer_norm_constant_rows_return_bias():
    gain = constant(np.full(4, 2.0))
    bias = constant(np.array([1.0, 2.0, 3.0, 4.0]))
    out = layer_norm(constant(np.full((3, 4), 9.0)), gain, bias)
    assert np.array_equal(out.data, np.broadcast_to(bias.data, (3, 4)))


def test_layer_norm_two_point_row():
    gain = constant(np.ones(2))
    bias = constant(np.zeros(2))
    out = layer_norm(constant([[1.0, 3.0]]), gain, bias)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_matches_naive():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 8)) * 4 + 1
    gain = rng.normal(size=8)
    bias = rng.normal(size=8)
    out = layer_norm(constant(x), constant(gain), constant(bias))
    assert np.allclose(out.data, layer_norm_naive(x, gain, bias), atol=1e-12)


def test_layer_norm_output_statistics():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 32)) * 5
    out = layer_norm(constant(x), constant(np.ones(32)), constant(np.zeros(32)))
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-4)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=8), st.floats(-20, 20))
def test_layer_norm_shift_invariance(row, c):
    width = len(row)
    gain = constant(np.ones(width))
    bias = constant(np.zeros(width))
    a = layer_norm(constant([row]), gain, bias).data
    b = layer_norm(constant([[v + c for v in row]]), gain, bias).data
    assert np.allclose(a, b, atol=1e-9)


def test_layer_norm_affine_shape_check():
    with pytest.raises(ContractError):
        layer_norm(constant(np.ones((2, 4))), constant(np.ones(3)), constant(np.zeros(4)))


def test_log_rejects_nonpositive():
    with pytest.raises(NumericError):
        log(constant([1.0, 0.0]))
    with pytest.raises(NumericError):
        log(constant([-1.0]))


def test_item_requires_single_element():
    with pytest.raises(ContractError):
        constant([1.0, 2.0]).item()
    assert constant(3.5).item() == 3.5


def test_backward_requires_scalar():
    x = Param(np.ones(3), "x")
    with pytest.raises(ContractError):
        backward(add(x, x))


# ---------------------------------------------------------------------------
# gradients: closed forms
# ---------------------------------------------------------------------------


def test_grad_sum_is_ones():
    x = Param(np.arange(6.0).reshape(2, 3), "x")
    backward(tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_grad_quadratic():
    x = Param(np.array([1.0, -2.0, 3.0]), "x")
    backward(tensor_sum(mul(x, x)))
    assert np.allclose(x.grad, 2.0 * x.data, atol=1e-15)


def test_grad_reused_node_accumulates():
    x = Param(np.array([4.0]), "x")
    backward(tensor_sum(add(x, x)))
    assert np.array_equal(x.grad, [2.0])


def test_grad_broadcast_bias_sums_over_rows():
    x = constant(np.ones((5, 3)))
    b = Param(np.zeros(3), "b")
    backward(tensor_sum(add(x, b)))
    assert np.array_equal(b.grad, np.full(3, 5.0))


def test_grad_scalar_times_matrix_broadcast():
    s = Param(np.array(2.0), "s")
    y = constant(np.arange(4.0).reshape(2, 2))
    backward(tensor_sum(mul(s, y)))
    assert s.grad.shape == ()
    assert float(s.grad) == 6.0


def test_grad_matmul_closed_form():
    # d/dA sum(A @ B) = ones @ B^T, d/dB = A^T @ ones
    rng = np.random.default_rng(4)
    a = Param(rng.normal(size=(3, 4)), "a")
    b = Param(rng.normal(size=(4, 2)), "b")
    backward(tensor_sum(matmul(a, b)))
    ones = np.ones((3, 2))
    assert np.allclose(a.grad, ones @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.data.T @ ones, atol=1e-12)


def test_grad_relu_gates_negative_side():
    x = Param(np.array([-2.0, -0.5, 0.5, 2.0]), "x")
    backward(tensor_sum(relu(x)))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0, 1.0])


def test_grad_absolute_is_sign():
    x = Param(np.array([-3.0, 2.0]), "x")
    backward(tensor_sum(absolute(x)))
    assert np.array_equal(x.grad, [-1.0, 1.0])


def test_grad_log():
    x = Param(np.array([0.5, 2.0]), "x")
    backward(tensor_sum(log(x)))
    assert np.allclose(x.grad, 1.0 / x.data, atol=1e-15)


def test_param_grad_persists_and_accumulates():
    x = Param(np.array([1.0]), "x")
    backward(tensor_sum(scale(x, 3.0)))
    backward(tensor_sum(scale(x, 2.0)))
    assert np.array_equal(x.grad, [5.0])
    zero_gradients([x])
    assert np.array_equal(x.grad, [0.0])


def test_constant_gets_no_grad():
    c = constant(np.ones(3))
    x = Param(np.ones(3), "x")
    backward(tensor_sum(mul(c, x)))
    assert c.grad is None


# ---------------------------------------------------------------------------
# gradients: structural ops against central differences
# ---------------------------------------------------------------------------


def _probe(shape, seed):
    return constant(np.random.default_rng(seed).normal(size=shape))


def test_grad_gather_scatter_concat_pipeline():
    rng = np.random.default_rng(5)
    x = Param(rng.normal(size=(6, 3)), "x")
    idx = np.array([4, 0, 4, 2])
    probe = _probe((6, 6), 99)

    def make_loss():
        g = gather_rows(x, idx)              # (4, 3) with a repeated row
        h = concat([g, relu(g)], axis=-1)    # (4, 6)
        s = scatter_rows(h, np.array([1, 3, 0, 5]), 6)  # (6, 6)
        t = transpose(reshape(s, (6, 2, 3)), (1, 0, 2))
        flat = reshape(t, (6, 6))
        return tensor_sum(mul(flat, probe))

    err = finite_diff_check(make_loss, [x], samples=18, seed=0)
    assert err < 1e-6


def test_grad_gather_repeated_rows_accumulate():
    x = Param(np.zeros((3, 2)), "x")
    out = gather_rows(x, np.array([1, 1, 1]))
    backward(tensor_sum(out))
    assert np.array_equal(x.grad, [[0.0, 0.0], [3.0, 3.0], [0.0, 0.0]])


def test_scatter_rows_places_and_zero_fills():
    x = constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = scatter_rows(x, np.array([2, 0]), 4)
    assert np.array_equal(
        out.data, [[3.0, 4.0], [0.0, 0.0], [1.0, 2.0], [0.0, 0.0]]
    )


def test_grad_softmax_against_central_differences():
    rng = np.random.default_rng(6)
    x = Param(rng.normal(size=(4, 5)), "x")
    probe = _probe((4, 5), 17)

    def make_loss():
        return tensor_sum(mul(softmax_rows(x), probe))

    assert finite_diff_check(make_loss, [x], samples=20, seed=1) < 1e-6


def test_grad_layer_norm_against_central_differences():
    rng = np.random.default_rng(7)
    x = Param(rng.normal(size=(3, 6)), "x")
    gain = Param(rng.normal(size=6), "gain")
    bias = Param(rng.normal(size=6), "bias")
    probe = _probe((3, 6), 23)

    def make_loss():
        return tensor_sum(mul(layer_norm(x, gain, bias), probe))

    assert finite_diff_check(make_loss, [x, gain, bias], samples=30, seed=2) < 1e-6


def test_grad_batched_matmul_against_central_differences():
    rng = np.random.default_rng(8)
    a = Param(rng.normal(size=(2, 3, 4)), "a")
    b = Param(rng.normal(size=(4, 5)), "b")
    probe = _probe((2, 3, 5), 31)

    def make_loss():
        return tensor_sum(mul(matmul(a, b), probe))

    assert finite_diff_check(make_loss, [a, b], samples=40, seed=3) < 1e-6


def test_operator_sugar_matches_functions():
    x = constant(np.array([1.0, -2.0]))
    y = constant(np.array([3.0, 5.0]))
    assert np.array_equal((x + y).data, add(x, y).data)
    assert np.array_equal((x - y).data, sub(x, y).data)
    assert np.array_equal((x * 2.0).data, scale(x, 2.0).data)
    assert np.array_equal((x * y).data, mul(x, y).data)
    assert np.array_equal((-x).data, [-1.0, 2.0])
    assert np.array_equal((x / 2).data, [0.5, -1.0])
    assert np.array_equal((1.0 + x).data, [2.0, -1.0])
