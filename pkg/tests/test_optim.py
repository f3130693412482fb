import numpy as np
import pytest

from trimtrain.optim import SGD, OptimizerState, sgd_step


def test_plain_sgd_example():
    w = {"w": np.array([1.0])}
    sgd_step(w, {"w": np.array([0.5])}, OptimizerState(lr=0.1))
    assert w["w"][0] == 0.95


def test_zero_gradient_no_change():
    w = {"w": np.arange(4.0)}
    sgd_step(w, {"w": np.zeros(4)}, OptimizerState(lr=0.1))
    assert np.array_equal(w["w"], np.arange(4.0))


def test_momentum_two_steps_match_recurrence():
    mu, lr, wd = 0.5, 0.1, 0.01
    w = {"w": np.array([2.0])}
    state = OptimizerState(lr, mu, wd)
    g1, g2 = 0.3, -0.7
    sgd_step(w, {"w": np.array([g1])}, state)
    sgd_step(w, {"w": np.array([g2])}, state)
    w0 = 2.0
    v1 = g1 + wd * w0
    w1 = w0 - lr * v1
    v2 = mu * v1 + g2 + wd * w1
    w2 = w1 - lr * v2
    assert abs(w["w"][0] - w2) < 1e-15
    assert state.velocity["w"].shape == (1,)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, OptimizerState(0.1))


def test_schedule():
    opt = SGD({"w": np.zeros(1)}, 0.1, schedule=[(100, 0.5), (10, 0.1)])
    assert opt.lr_at(0) == 0.1
    assert abs(opt.lr_at(10) - 0.01) < 1e-15
    assert abs(opt.lr_at(100) - 0.005) < 1e-15
    with pytest.raises(ValueError):
        SGD({}, 0.0)


def test_step_counter_and_override():
    p = {"w": np.zeros(1)}
    opt = SGD(p, 1.0, schedule=[(1, 0.5)])
    opt.step({"w": np.ones(1)})
    opt.step({"w": np.ones(1)})
    assert p["w"][0] == -1.5
    opt.step({"w": np.ones(1)}, iteration=0)
    assert p["w"][0] == -2.5 and opt.iteration == 1
