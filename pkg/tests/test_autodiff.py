"""Gradient-engine tests: hand derivatives, finite differences, graph surgery."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osdalab.autodiff import (
    NumericError,
    Tensor,
    backward,
    gradient_reversal,
    no_grad,
    nuclear_norm,
    stop_gradient,
)

from conftest import assert_grads_match, finite_difference_grad, max_relative_error


def test_sum_gradient_is_ones():
    w = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    backward(w.sum())
    np.testing.assert_array_equal(w.grad, np.ones(3))


def test_elementwise_square_gradient():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward((w * w).sum())
    np.testing.assert_allclose(w.grad, [2.0, 4.0, 6.0], rtol=0, atol=0)


def test_backward_rejects_non_scalar():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(ValueError):
        backward(w * 2.0)


def test_backward_accumulates_until_zeroed():
    w = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    backward(w.sum())
    backward(w.sum())
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])
    w.zero_grad()
    backward(w.sum())
    np.testing.assert_array_equal(w.grad, [1.0, 1.0])


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    b1 = Tensor(rng.standard_normal(6), requires_grad=True)
    w2 = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    b2 = Tensor(rng.standard_normal(3), requires_grad=True)
    x = Tensor(rng.standard_normal((5, 4)))

    def loss_fn():
        h = (x.matmul(w1) + b1).relu()
        out = h.matmul(w2) + b2
        return ((out * out).mean()).data

    params = [w1, b1, w2, b2]
    h = (x.matmul(w1) + b1).relu()
    loss = ((h.matmul(w2) + b2) * (h.matmul(w2) + b2)).mean()
    backward(loss)
    assert_grads_match(loss_fn, params)


@pytest.mark.parametrize(
    "build",
    [
        lambda t: t.exp().sum(),
        lambda t: (t * t + 2.0 * t).mean(),
        lambda t: ((t + 3.5).log()).sum(),
        lambda t: t.relu().sum(),
        lambda t: (t / (t * t + 1.0)).sum(),
        lambda t: (t.clamp(-0.8, 0.8) * t).sum(),
        lambda t: (t ** 3.0).mean(),
        lambda t: t[1:, :2].sum(),
    ],
    ids=["exp", "poly", "log", "relu", "div", "clamp", "pow", "slice"],
)
def test_elementwise_ops_match_finite_differences(build):
    # 100 random instances per op keeps the check honest without being slow.
    rng = np.random.default_rng(123)
    for _ in range(100):
        t = Tensor(rng.uniform(-2.0, 2.0, size=(3, 3)), requires_grad=True)
        backward(build(t))
        numeric = finite_difference_grad(lambda: build(t).data, t)
        assert max_relative_error(t.grad, numeric) <= 1e-4


def test_matmul_and_reductions_match_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def loss_fn():
            return (a.matmul(b).sum(axis=1, keepdims=True) * a.matmul(b).sum(axis=1, keepdims=True)).mean().data

        prod = a.matmul(b).sum(axis=1, keepdims=True)
        backward((prod * prod).mean())
        for p in (a, b):
            numeric = finite_difference_grad(loss_fn, p)
            assert max_relative_error(p.grad, numeric) <= 1e-4
        a.zero_grad()
        b.zero_grad()


class TestGradientReversal:
    def test_forward_is_bit_identical(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        out = gradient_reversal(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_upstream_gradient_is_negated(self):
        x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        backward(gradient_reversal(x, 1.0).sum())
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0])

    def test_coefficient_scales_reversal(self):
        # sum has derivative one everywhere, so the reversal is isolated.
        w = Tensor(np.array([0.3, -0.7, 2.0]), requires_grad=True)
        backward(gradient_reversal(w, 2.0).sum())
        np.testing.assert_array_equal(w.grad, [-2.0, -2.0, -2.0])

    def test_rejects_nonpositive_coefficient(self):
        with pytest.raises(ValueError):
            gradient_reversal(Tensor(np.zeros(2)), 0.0)


class TestStopGradient:
    def test_forward_is_bit_identical(self):
        x = Tensor(np.array([0.2]), requires_grad=True)
        np.testing.assert_array_equal(stop_gradient(x).data, x.data)

    def test_blocks_all_gradient(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(stop_gradient(w).sum() + Tensor(0.0, requires_grad=True))
        assert w.grad is None

    def test_cuts_one_branch_of_a_product(self):
        # d/dw of w * const(w) is const(w), not 2w.
        w = Tensor(np.array([3.0]), requires_grad=True)
        backward((w * stop_gradient(w)).sum())
        np.testing.assert_array_equal(w.grad, [3.0])


class TestNuclearNorm:
    def test_identity_matrix(self):
        assert nuclear_norm(Tensor(np.eye(2))).item() == pytest.approx(2.0, abs=1e-12)

    def test_rank_one_matrix(self):
        # Singular values of [[1,0],[1,0]] are sqrt(2) and 0.
        value = nuclear_norm(Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))).item()
        assert value == pytest.approx(np.sqrt(2.0), abs=1e-12)

    def test_zero_matrix(self):
        assert nuclear_norm(Tensor(np.zeros((3, 2)))).item() == 0.0

    def test_matches_library_svd_on_random_batches(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            a = rng.standard_normal((48, 3))
            ours = nuclear_norm(Tensor(a)).item()
            reference = np.linalg.svd(a, compute_uv=False).sum()
            assert abs(ours - reference) <= 1e-8

    def test_wide_matrices_transpose_correctly(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((3, 48))
        ours = nuclear_norm(Tensor(a)).item()
        assert abs(ours - np.linalg.svd(a, compute_uv=False).sum()) <= 1e-8

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            a = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
            backward(nuclear_norm(a))
            numeric = finite_difference_grad(lambda: nuclear_norm(Tensor(a.data)).data, a)
            assert max_relative_error(a.grad, numeric) <= 1e-4
            a.zero_grad()

    def test_dominates_frobenius_norm(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            a = rng.standard_normal((8, 4))
            assert nuclear_norm(Tensor(a)).item() >= np.linalg.norm(a) - 1e-10

    def test_equals_frobenius_for_rank_one(self):
        rng = np.random.default_rng(15)
        u = rng.standard_normal((6, 1))
        v = rng.standard_normal((1, 4))
        a = u @ v
        assert nuclear_norm(Tensor(a)).item() == pytest.approx(np.linalg.norm(a), abs=1e-10)

    def test_rejects_non_matrix(self):
        with pytest.raises(ValueError):
            nuclear_norm(Tensor(np.zeros(3)))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            nuclear_norm(Tensor(np.array([[np.nan, 0.0], [0.0, 1.0]])))


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(99)
        w1 = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        w2 = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        x = Tensor(rng.standard_normal((6, 4)))
        loss = (x.matmul(w1).relu().matmul(w2).exp()).mean()
        backward(loss)
        return w1.grad.copy(), w2.grad.copy()

    first = run()
    second = run()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_no_grad_disables_recording():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with no_grad():
        out = (w * 2.0).sum()
    assert not out.requires_grad
    with pytest.raises(ValueError):
        # the no-grad output is a detached scalar, so nothing flows
        backward(w * 1.0)


def test_nan_gradient_is_reported_with_op_name():
    # Forward stays finite (only the log of 1 is consumed) but the log
    # node's backward computes 0/0 for the masked-out entry.
    w = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    loss = w.log()[1:].sum()
    assert np.isfinite(loss.data)
    with pytest.raises(NumericError, match="log"):
        backward(loss)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_reversal_and_stop_are_identities_forward(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    np.testing.assert_array_equal(gradient_reversal(x).data, x.data)
    np.testing.assert_array_equal(stop_gradient(x).data, x.data)
