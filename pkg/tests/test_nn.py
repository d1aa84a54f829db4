"""MLP application and the Adam update against closed-form oracles."""

import numpy as np
import pytest

from portrait_studio.errors import InvalidInputError, NumericalError
from portrait_studio.nn import AdamState, MLPParams, adam_step, mlp_apply, mlp_init
from portrait_studio.tensor import Tensor, grad_check


def test_zero_weights_zero_biases_give_zero_output():
    p = MLPParams([2, 3], [np.zeros((2, 3))], [np.zeros(3)])
    out = mlp_apply(p, np.array([1.0, -2.0]))
    assert np.allclose(out.data, 0.0)


def test_identity_single_layer():
    p = MLPParams([2, 2], [np.eye(2)], [np.zeros(2)])
    out = mlp_apply(p, np.array([1.0, 2.0]))
    assert np.allclose(out.data, [1.0, 2.0])


def test_two_layer_net_matches_straight_line_recomputation():
    rng = np.random.default_rng(42)
    p = mlp_init([2, 4, 3], rng, activation="tanh")
    x = np.array([0.5, -0.5])
    out = mlp_apply(p, x)
    # independent straight-line evaluation of the same arithmetic
    h = np.tanh(x @ p.weights[0] + p.biases[0])
    expected = h @ p.weights[1] + p.biases[1]
    assert np.allclose(out.data, expected, atol=1e-12)


def test_mlp_shape_mismatch_raises():
    p = mlp_init([3, 2], np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        mlp_apply(p, np.zeros(4))


def test_mlp_gradient_wrt_input_and_weights():
    rng = np.random.default_rng(7)
    p = mlp_init([3, 5, 2], rng)
    x0 = rng.standard_normal(3)

    assert grad_check(lambda t: mlp_apply(p, t).sum(), x0) < 1e-7

    def loss_of_w0(t):
        ws = [t, Tensor(p.weights[1])]
        bs = [Tensor(b) for b in p.biases]
        return mlp_apply(p, Tensor(x0), weights=ws, biases=bs).sum()

    assert grad_check(loss_of_w0, p.weights[0]) < 1e-7


def test_adam_zero_gradient_is_identity_on_params():
    state = AdamState(lr=0.05)
    params = np.array([1.0, -2.0, 3.0])
    for _ in range(3):
        state, params = adam_step(state, params, np.zeros(3))
    assert np.allclose(params, [1.0, -2.0, 3.0])
    assert state.step == 3


def test_adam_zero_lr_updates_moments_only():
    state = AdamState(lr=0.0)
    params = np.array([1.0])
    state, new = adam_step(state, params, np.array([2.0]))
    assert np.allclose(new, params)
    assert state.m is not None and state.m[0] != 0.0


def test_adam_first_step_closed_form():
    # first step magnitude is ~lr*sign(g): params [1.0], grad [2.0], lr 0.1 -> ~0.9
    state = AdamState(lr=0.1)
    state, new = adam_step(state, np.array([1.0]), np.array([2.0]))
    assert new[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-12)
    assert new[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_rejects_nonfinite_gradient_with_index():
    state = AdamState()
    with pytest.raises(NumericalError, match="index"):
        adam_step(state, np.zeros(3), np.array([0.0, np.nan, 0.0]))


def test_adam_shape_mismatch():
    with pytest.raises(InvalidInputError):
        adam_step(AdamState(), np.zeros(3), np.zeros(4))
