import math

import numpy as np
import pytest

from gaitscore.optim import AdamState, NonFiniteError, OptimConfig, adam_step


def reference_adam(x0, grad_fn, steps, lr, b1, b2, eps):
    """Scalar Adam in plain Python floats."""
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_defaults_match_configuration():
    cfg = OptimConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.epochs) == (1e-4, 0.5, 0.999, 1e-8, 100)


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimConfig(**kwargs)


def test_zero_gradient_is_fixed_point():
    params = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.zeros(2, np.float32)}, state, OptimConfig())
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert state.t == 1


def test_single_step_hand_evaluation():
    params = {"w": np.array([1.0])}
    adam_step(params, {"w": np.array([1.0])}, AdamState.for_params(params), OptimConfig())
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert params["w"][0] == pytest.approx(1.0 - 1e-4 / (1 + 1e-8), abs=1e-15)
    assert params["w"][0] == pytest.approx(0.9999, abs=1e-10)


@pytest.mark.parametrize("g", [1.0, -3.5, 1e-3, 250.0])
def test_first_step_magnitude_is_lr_times_sign(g):
    cfg = OptimConfig()
    params = {"w": np.array([0.0])}
    adam_step(params, {"w": np.array([g])}, AdamState.for_params(params), cfg)
    expected = -math.copysign(cfg.lr / (1 + cfg.eps / abs(g)), g)
    assert params["w"][0] == pytest.approx(expected, rel=1e-9)


def test_quadratic_converges_and_matches_reference_loop():
    cfg = OptimConfig(lr=1e-3)
    params = {"x": np.array([5.0])}
    state = AdamState.for_params(params)
    for _ in range(20000):
        adam_step(params, {"x": 2.0 * params["x"]}, state, cfg)
    assert abs(params["x"][0]) < 0.05
    ref = reference_adam(5.0, lambda x: 2 * x, 20000, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    assert params["x"][0] == pytest.approx(ref, abs=1e-9)


def test_default_lr_moves_at_most_lr_per_step():
    params = {"x": np.array([5.0])}
    state = AdamState.for_params(params)
    for _ in range(1000):
        adam_step(params, {"x": 2.0 * params["x"]}, state, OptimConfig())
    moved = 5.0 - params["x"][0]
    assert 0.099 < moved <= 1000 * 1e-4 + 1e-12


def test_non_finite_gradient_rejected_without_side_effects():
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = AdamState.for_params(params)
    adam_step(params, {"a": np.array([0.5]), "b": np.array([0.5])}, state, OptimConfig())
    snapshot = ({k: v.copy() for k, v in params.items()}, {k: v.copy() for k, v in state.m.items()}, state.t)
    with pytest.raises(NonFiniteError, match="b"):
        adam_step(params, {"a": np.array([0.5]), "b": np.array([np.nan])}, state, OptimConfig())
    assert state.t == snapshot[2]
    for k in params:
        np.testing.assert_array_equal(params[k], snapshot[0][k])
        np.testing.assert_array_equal(state.m[k], snapshot[1][k])


def test_update_is_elementwise_under_permutation():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(10)
    grads = [rng.standard_normal(10) for _ in range(5)]
    perm = rng.permutation(10)
    a = {"w": w.copy()}
    b = {"w": w[perm].copy()}
    sa, sb = AdamState.for_params(a), AdamState.for_params(b)
    for g in grads:
        adam_step(a, {"w": g}, sa, OptimConfig())
        adam_step(b, {"w": g[perm]}, sb, OptimConfig())
    np.testing.assert_array_equal(a["w"][perm], b["w"])


def test_missing_gradients_leave_parameters_frozen():
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    adam_step(params, {"a": np.array([1.0])}, AdamState.for_params(params), OptimConfig())
    assert params["b"][0] == 2.0 and params["a"][0] < 1.0


def test_float32_parameters_stay_float32():
    params = {"w": np.ones(3, np.float32)}
    adam_step(params, {"w": np.ones(3, np.float32)}, AdamState.for_params(params), OptimConfig())
    assert params["w"].dtype == np.float32
