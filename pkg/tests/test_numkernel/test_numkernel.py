import numpy as np
import pytest

from app.errors import AllMasked, ShapeMismatch
from app.numkernel import (
    ParamSet,
    attended_output,
    attention,
    dense,
    grad_check,
    log_softmax,
    lstm_cell,
    mse_loss,
    nll_loss,
    sgd_step,
    sigmoid,
    softmax,
)
from app.pipeline import gradcheck_suite


def test_activations():
    """Reference values of the elementwise functions."""
    assert sigmoid(0.0) == pytest.approx(0.5)
    np.testing.assert_allclose(softmax(np.zeros(2)), [0.5, 0.5])
    np.testing.assert_allclose(np.exp(log_softmax(np.array([[1.0, 2.0, 3.0]]))).sum(), 1.0)
    assert np.all(np.isfinite(sigmoid(np.array([-1000.0, 1000.0]))))


def test_lstm_zero_parameters():
    """All-zero weights and state give a zero hidden state."""
    d, h = 3, 2
    h_t, c_t, _ = lstm_cell(np.ones(d), np.zeros(h), np.zeros(h), np.zeros((4 * h, d + h)), np.zeros(4 * h))
    np.testing.assert_allclose(h_t, 0.0)
    np.testing.assert_allclose(c_t, 0.0)


def test_lstm_identity_carry():
    """Forget gate saturated open and input gate shut carry the cell state unchanged."""
    d, h = 2, 3
    b = np.zeros(4 * h)
    b[:h] = -50.0
    b[h:2 * h] = 50.0
    c_prev = np.array([0.3, -0.7, 1.2])
    _, c_t, _ = lstm_cell(np.ones(d), np.zeros(h), c_prev, np.zeros((4 * h, d + h)), b)
    np.testing.assert_allclose(c_t, c_prev, atol=1e-12)


def test_lstm_shape_mismatch():
    """Weights of the wrong shape are rejected."""
    with pytest.raises(ShapeMismatch):
        lstm_cell(np.ones(3), np.zeros(2), np.zeros(2), np.zeros((8, 4)), np.zeros(8))


def test_attention_symmetry():
    """Equal states attract uniform weights; a single state gets weight 1."""
    H = np.tile(np.array([0.2, -0.4, 0.9]), (4, 1))
    context, alpha, _ = attention(H, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(alpha, 0.25)
    np.testing.assert_allclose(context, H[0])

    context, alpha, _ = attention(H[:1], np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(alpha, [1.0])
    np.testing.assert_allclose(context, H[0])


def test_attended_output_bounds():
    """Zero weights give zero output; a large bias saturates tanh."""
    out, _ = attended_output(np.ones(2), np.ones(2), np.zeros((2, 4)), np.zeros(2))
    np.testing.assert_allclose(out, 0.0)
    out, _ = attended_output(np.ones(2), np.ones(2), np.zeros((2, 4)), np.full(2, 10.0))
    np.testing.assert_allclose(out, 1.0, atol=1e-8)


def test_losses():
    """Reference losses and the all-masked error."""
    loss, _ = mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert loss == 0.0
    loss, _ = mse_loss(np.array([1.0]), np.array([0.0]))
    assert loss == pytest.approx(1.0)
    loss, grad = mse_loss(np.array([1.0, 5.0]), np.array([0.0, 0.0]), mask=np.array([1.0, 0.0]))
    assert loss == pytest.approx(1.0)
    assert grad[1] == 0.0
    with pytest.raises(AllMasked):
        mse_loss(np.array([1.0]), np.array([0.0]), mask=np.array([0.0]))

    log_probs = log_softmax(np.zeros((2, 4)))
    loss, _ = nll_loss(log_probs, [0, 3])
    assert loss == pytest.approx(np.log(4.0))


def test_sgd_step():
    """value - lr * grad, then gradients are cleared."""
    params = ParamSet({"w": np.array([1.0])})
    params.accumulate("w", np.array([2.0]))
    sgd_step(params, 0.1)
    assert params["w"][0] == pytest.approx(0.8)
    assert params.grad("w")[0] == 0.0

    sgd_step(params, 0.1)
    assert params["w"][0] == pytest.approx(0.8)


def test_param_set_serialisation():
    """Tensors survive to_dict/from_dict with their shapes."""
    params = ParamSet.uniform(np.random.default_rng(0), {"W": ((2, 3), 3), "b": ((2,), 3)})
    assert np.all(np.abs(params["W"]) <= 1 / np.sqrt(3))
    again = ParamSet.from_dict(params.to_dict())
    np.testing.assert_array_equal(again["W"], params["W"])
    assert again["b"].shape == (2,)


def test_grad_check_dense_mse():
    """Dense + MSE analytic gradients match central differences."""
    rng = np.random.default_rng(0)
    params = ParamSet({"W": rng.normal(size=(2, 3)), "b": rng.normal(size=2)})
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def fn(p):
        y = dense(x, p["W"], p["b"])
        loss, dy = mse_loss(y, target)
        p.accumulate("W", dy.T @ x)
        p.accumulate("b", dy.sum(axis=0))
        return loss

    assert grad_check(fn, params) < 1e-6


def test_grad_check_detects_wrong_gradient():
    """A deliberately wrong gradient is reported."""
    params = ParamSet({"w": np.array([1.5])})

    def fn(p):
        p.accumulate("w", np.array([0.0]))
        return float(p["w"][0] ** 2)

    assert grad_check(fn, params) > 0.5


@pytest.mark.slow
def test_gradcheck_suite_within_limits():
    """Every differentiable component passes over several seeds."""
    worst = gradcheck_suite(n_seeds=3, seed=0)
    single = ("dense_mse", "lstm_cell_tanh", "lstm_cell_sigmoid", "attention", "attended_output")
    for name in single:
        assert worst[name] < 1e-6, name
    assert worst["sage_edge_head"] < 1e-5
    assert worst["packet_model"] < 1e-4
