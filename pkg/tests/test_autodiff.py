"""Gradient engine: finite-difference agreement, stop-gradient, diagnostics."""

import numpy as np
import pytest

from nerfblocks import autodiff as ad
from nerfblocks.autodiff import GradientError, Tensor

from helpers import central_difference_check, rand_tensor


def test_sum_of_parameters_gradient_is_one():
    rng = np.random.default_rng(0)
    t = rand_tensor(rng, (4, 5))
    loss = ad.tensor_sum(t)
    ad.backward(loss)
    assert np.array_equal(t.grad, np.ones((4, 5)))


def test_frozen_subgraph_receives_zero_gradient():
    rng = np.random.default_rng(1)
    a = rand_tensor(rng, (3,))
    b = rand_tensor(rng, (3,))
    frozen = ad.detach(ad.exp(b))
    loss = ad.tensor_sum(a * frozen)
    ad.backward(loss)
    assert b.grad is None
    assert np.allclose(a.grad, np.exp(b.data))


def test_detached_loss_refuses_backward():
    t = Tensor(np.ones(3))
    with pytest.raises(GradientError):
        ad.backward(ad.tensor_sum(t))


@pytest.mark.parametrize("op_name", ["exp", "log", "sqrt", "sin", "cos", "softplus", "sigmoid", "relu"])
def test_unary_op_gradients(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**31)
    x = Tensor(rng.uniform(0.2, 1.8, size=(3, 4)), requires_grad=True)
    op = getattr(ad, op_name)
    central_difference_check(lambda: ad.tensor_sum(op(x) ** 2), [x])


def test_binary_broadcast_gradients():
    rng = np.random.default_rng(5)
    a = rand_tensor(rng, (4, 3))
    b = rand_tensor(rng, (3,))
    c = rand_tensor(rng, (4, 1))

    def fn():
        return ad.tensor_mean((a * b + c / (ad.sigmoid(b) + 0.5)) ** 2)

    central_difference_check(fn, [a, b, c])


def test_matmul_concat_reshape_gradients():
    rng = np.random.default_rng(6)
    a = rand_tensor(rng, (5, 3))
    w = rand_tensor(rng, (7, 4))

    def fn():
        x = ad.concatenate([a, ad.sin(a), ad.broadcast_to(ad.reshape(ad.tensor_sum(a, axis=1), (5, 1)), (5, 1))], axis=1)
        y = ad.matmul(x, w)
        return ad.tensor_sum(ad.relu(y) ** 2)

    central_difference_check(fn, [a, w])


def test_cumsum_take_stack_gradients():
    rng = np.random.default_rng(7)
    x = rand_tensor(rng, (4, 6))
    table = rand_tensor(rng, (5, 3))
    ids = np.array([0, 3, 3, 1])

    def fn():
        c = ad.cumsum(x * x, axis=1)
        rows = ad.take(table, ids)
        s = ad.stack([rows, rows * 2.0], axis=0)
        return ad.tensor_mean(c) + ad.tensor_sum(ad.sigmoid(s))

    central_difference_check(fn, [x, table])


def test_gather_scatter_add_accumulates_repeated_rows():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    rows = ad.take(table, np.array([1, 1, 1, 2]))
    ad.backward(ad.tensor_sum(rows))
    expected = np.zeros((4, 2))
    expected[1] = 3.0
    expected[2] = 1.0
    assert np.array_equal(table.grad, expected)


def test_maximum_and_transpose_gradients():
    rng = np.random.default_rng(8)
    a = rand_tensor(rng, (3, 3))

    def fn():
        return ad.tensor_sum(ad.maximum(ad.transpose(a), 0.1) ** 2)

    central_difference_check(fn, [a])


def test_finite_checks_name_offending_op():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    with ad.finite_checks(True):
        with pytest.raises(GradientError, match="log"):
            ad.log(x)


def test_backward_check_finite_names_op():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    y = ad.log(x)  # -inf at 0
    loss = ad.tensor_sum(y)
    with pytest.raises(GradientError):
        ad.backward(loss, check_finite=True)


def test_no_grad_suppresses_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x) * 2.0
    assert not y.requires_grad and y._backward is None


def test_float32_graph_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ad.tensor_mean((1.0 - ad.exp(-x * 0.5)) ** 2)
    assert y.data.dtype == np.float32
    ad.backward(y)
    assert x.grad.dtype == np.float32


def test_double_use_of_node_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.sin(x)
    loss = ad.tensor_sum(y * y)  # dy/dx used twice through product rule
    ad.backward(loss)
    expected = 2.0 * np.sin(2.0) * np.cos(2.0)
    assert np.allclose(x.grad, expected)


def test_deterministic_gradients_across_runs():
    def run():
        rng = np.random.default_rng(42)
        a = Tensor(rng.normal(size=(16, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
        loss = ad.tensor_mean(ad.sigmoid(ad.matmul(a, w)) ** 2)
        ad.backward(loss)
        return a.grad.copy(), w.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])
