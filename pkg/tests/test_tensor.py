import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bridgecond import tensor as T
from bridgecond.nn import MLP
from bridgecond.tensor import NumericError, Parameter, ShapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))
    np.testing.assert_array_equal((a @ Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    for c in (-7.0, 0.0, 3.5, 400.0):
        np.testing.assert_allclose(T.softmax(Tensor([c, c + math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-12)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] < 1e-300


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, shift):
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + shift)).data, p, atol=1e-12)


def test_softmax_mask_zeroes_entries_and_rejects_empty_rows():
    p = T.softmax(Tensor([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).data
    assert p[1] == 0.0 and p.sum() == pytest.approx(1.0)
    with pytest.raises(NumericError):
        T.softmax(Tensor([1.0, 2.0]), mask=np.array([False, False]))


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full(4, 3.0)), ones, zeros).data, np.zeros(4))
    np.testing.assert_allclose(T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0).data,
                               [-1.0, 1.0])
    out = T.layer_norm(Tensor([1.0, 5.0, 2.0]), Tensor(np.zeros(3)), Tensor(np.full(3, 0.7))).data
    np.testing.assert_array_equal(out, np.full(3, 0.7))


def test_attention_examples():
    rng = np.random.default_rng(0)
    q = Tensor(rng.standard_normal((3, 4)))
    v1 = rng.standard_normal((1, 2))
    out = T.scaled_dot_attention(q, Tensor(rng.standard_normal((1, 4))), Tensor(v1)).data
    np.testing.assert_allclose(out, np.repeat(v1, 3, axis=0))
    assert np.all(T.scaled_dot_attention(q, Tensor(np.ones((5, 4))), Tensor(np.zeros((5, 2)))).data == 0)
    # two keys: weights from the softmax of scaled scores, computed by hand
    qq, kk, vv = np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[2.0], [4.0]])
    w = np.exp(1 / math.sqrt(2)) / (np.exp(1 / math.sqrt(2)) + 1.0)
    out = T.scaled_dot_attention(Tensor(qq), Tensor(kk), Tensor(vv)).data
    assert out[0, 0] == pytest.approx(2 * w + 4 * (1 - w), abs=1e-14)


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        T.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeError):
        T.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))


def test_lora_examples():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((3, 5)))
    w = Parameter(rng.standard_normal((5, 4)), frozen=True)
    a = Parameter(rng.standard_normal((2, 5)))
    base = T.matmul(x, w).data
    np.testing.assert_array_equal(T.lora_linear(x, w, a, Parameter(np.zeros((4, 2))), 8.0).data, base)
    np.testing.assert_array_equal(T.lora_linear(x, w, a, Parameter(rng.standard_normal((4, 2))), 0.0).data, base)
    # rank one against the dense merged weight
    a1, b1 = rng.standard_normal((1, 5)), rng.standard_normal((4, 1))
    dense = x.data @ (w.data + 3.0 * (b1 @ a1).T)
    np.testing.assert_allclose(T.lora_linear(x, w, Parameter(a1), Parameter(b1), 3.0).data, dense, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_lora_zero_b_is_bit_identical_to_base(rank, d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, d_in)))
    w = Parameter(rng.standard_normal((d_in, d_out)), frozen=True)
    out = T.lora_linear(x, w, Parameter(rng.standard_normal((rank, d_in))), Parameter(np.zeros((d_out, rank))), 2.0)
    assert np.array_equal(out.data, T.matmul(x, w).data)


def test_lora_base_never_gets_gradient():
    rng = np.random.default_rng(2)
    w = Parameter(rng.standard_normal((3, 2)), frozen=True)
    a, b = Parameter(rng.standard_normal((1, 3))), Parameter(rng.standard_normal((2, 1)))
    T.backward(T.tsum(T.lora_linear(Tensor(rng.standard_normal((4, 3))), w, a, b, 1.0)))
    assert w.grad is None and a.grad is not None and b.grad is not None


def test_mse_examples():
    a = Tensor([1.0, 2.0])
    assert T.mse(a, a).item() == 0.0
    assert T.mse(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).item() == 1.0
    assert T.mse(Tensor([2.0, 0.0]), Tensor([0.0, 0.0])).item() == 2.0
    with pytest.raises(ShapeError):
        T.mse(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_nll_examples():
    logits = np.full((2, 3), -1e3)
    logits[0, 1] = logits[1, 2] = 1e3
    assert T.nll_loss(Tensor(logits), [1, 2]).item() == pytest.approx(0.0, abs=1e-12)
    assert T.nll_loss(Tensor(np.zeros((4, 7))), [0, 3, 6, 2]).item() == pytest.approx(math.log(7), abs=1e-14)
    assert T.nll_loss(Tensor([[0.0, math.log(3)]]), [1]).item() == pytest.approx(-math.log(3 / 4), abs=1e-14)
    with pytest.raises(ValueError):
        T.nll_loss(Tensor(np.zeros((1, 3))), [3])


def test_backward_sum_gives_ones_and_rejects_non_scalar():
    x = Parameter(np.arange(6.0).reshape(2, 3))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)


def test_backward_matches_finite_differences_on_linear_mse():
    rng = np.random.default_rng(3)
    w = Parameter(rng.standard_normal((4, 3)))
    x, y = Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((5, 3)))
    loss = lambda: T.mse(T.matmul(x, w), y)
    T.backward(loss())
    num = T.finite_diff_grad(loss, w)
    assert np.max(np.abs(w.grad - num)) / np.max(np.abs(num)) < 1e-6


def test_backward_clears_the_graph():
    x = Parameter([1.0, 2.0])
    y = T.tsum(x * x)
    T.backward(y)
    assert y._parents == () and y._backward is None


def test_frozen_parameter_stays_gradient_free():
    w = Parameter(np.ones((2, 2)), frozen=True)
    v = Parameter(np.ones((2, 2)))
    T.backward(T.tsum(T.matmul(v, w)))
    assert w.grad is None
    w.frozen = False
    assert w.requires_grad


def test_finite_diff_examples():
    p = Parameter([1.0, 2.0])
    np.testing.assert_allclose(T.finite_diff_grad(lambda: T.tsum(p * p), p, 1e-5), [2.0, 4.0], atol=1e-8)
    np.testing.assert_array_equal(T.finite_diff_grad(lambda: Tensor(3.0), p), [0.0, 0.0])


def test_finite_diff_agrees_with_backward_on_mlp():
    rng = np.random.default_rng(4)
    mlp = MLP(3, 5, 2, rng)
    x = Tensor(rng.standard_normal((4, 3)))
    loss = lambda: T.tsum(mlp(x) * mlp(x))
    T.backward(loss())
    for p in mlp.parameters():
        num = T.finite_diff_grad(loss, p)
        assert np.max(np.abs(p.grad - num)) / max(np.max(np.abs(num)), 1e-12) < 1e-4


def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NumericError):
        T.log(Tensor([0.0]))


def test_broadcasting_restricted_to_leading_dims():
    a = Tensor(np.ones((2, 3, 4)))
    assert (a + Tensor(np.ones((3, 4)))).shape == (2, 3, 4)
    with pytest.raises(ShapeError):
        a + Tensor(np.ones((2, 1, 4)))
    with pytest.raises(ShapeError):
        a + Tensor(np.ones(3))
    assert T.broadcast_to(Tensor(np.ones((2, 1, 4))), (2, 3, 4)).shape == (2, 3, 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_ops_are_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rng.standard_normal((3, 6)), rng.standard_normal(6), rng.standard_normal(6)
    run = lambda: T.softmax(T.layer_norm(Tensor(x), Tensor(g), Tensor(b)) @ Tensor(x.T)).data
    assert np.array_equal(run(), run())


def test_no_grad_records_nothing():
    p = Parameter([1.0])
    with T.no_grad():
        y = p * 3.0
    assert not y.requires_grad and T.grad_enabled()
