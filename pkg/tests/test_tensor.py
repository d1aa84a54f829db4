"""Autodiff core: op-level gradients against central differences."""

import numpy as np
import pytest

from portrait_studio.tensor import (Tensor, concat, gather_rows, grad_check,
                                    scatter_rows, stack)


def test_backward_accumulates_through_shared_node():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = x * x
    z = (y + y).sum()
    z.backward()
    assert np.allclose(x.grad, 4.0 * x.data)


def test_grad_check_quadratic():
    # f(x) = sum(x^2), analytic gradient 2x; at x=[3] that is 6.0
    err = grad_check(lambda t: (t * t).sum(), np.array([3.0]), eps=1e-4)
    assert err < 1e-6


def test_grad_check_linear_is_machine_precision():
    err = grad_check(lambda t: (t * 7.5).sum(), np.array([1.0, -2.0, 0.5]), eps=1e-4)
    assert err < 1e-10


def test_grad_check_sin_at_zero():
    err = grad_check(lambda t: t.sin().sum(), np.array([0.0]), eps=1e-4)
    assert err < 1e-6


@pytest.mark.parametrize("op", [
    lambda t: (t.exp()).sum(),
    lambda t: ((t + 2.1).log()).sum(),
    lambda t: ((t * t + 0.5).sqrt()).sum(),
    lambda t: (t.tanh() * 2.0).sum(),
    lambda t: t.sigmoid().sum(),
    lambda t: t.softplus().sum(),
    lambda t: (t.cos() + t.sin()).sum(),
    lambda t: (t / 1.7 - 0.3 * t).sum(),
    lambda t: (t ** 3.0).sum(),
    lambda t: t.cumsum(0).sum(),
    lambda t: (t.reshape(2, 3).transpose() @ Tensor(np.ones((2, 2)))).sum(),
    lambda t: (t[1:4] * t[0:3]).sum(),
])
def test_elementwise_ops_grad(op):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.0, 1.0, 6)
    assert grad_check(op, x, eps=1e-5) < 1e-6


def test_matmul_grad_both_sides():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    assert grad_check(lambda t: (t @ Tensor(b)).sum(), a) < 1e-7
    assert grad_check(lambda t: (Tensor(a) @ t).sum(), b) < 1e-7


def test_broadcast_add_mul_grad():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4))
    bias = rng.standard_normal(4)
    assert grad_check(lambda t: ((t + Tensor(bias)) * 2.0).sum(), x) < 1e-7
    assert grad_check(lambda t: ((Tensor(x) * t).sum()), bias) < 1e-7


def test_concat_stack_gather_scatter_grads():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3))
    idx = np.array([0, 2])

    def f_concat(t):
        return (concat([t, t * 2.0], axis=0)).sum()

    def f_stack(t):
        return (stack([t, t], axis=0) * 0.5).sum()

    def f_gather(t):
        return (gather_rows(t, idx) * 3.0).sum()

    def f_scatter(t):
        return (scatter_rows(gather_rows(t, idx), idx, 4) * 1.5).sum()

    for f in (f_concat, f_stack, f_gather, f_scatter):
        assert grad_check(f, x) < 1e-7


def test_cumsum_matches_numpy():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.allclose(x.cumsum(1).data, np.cumsum(x.data, axis=1))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(Exception):
        (x * 2).backward()
