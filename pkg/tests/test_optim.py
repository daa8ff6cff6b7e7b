"""Adam update rule against hand evaluation and an independent re-implementation."""

import numpy as np
import pytest

from panelcast.errors import ConfigError
from panelcast.optim import adam_step, clip_global_norm, init_adam


def boxed(value):
    return {"p": np.array(value, dtype=np.float64)}


class TestAdam:
    def test_zero_gradients_identity(self):
        blocks = boxed([1.0, -2.0, 3.5])
        before = blocks["p"].copy()
        state = init_adam(blocks, learning_rate=0.01)
        adam_step(blocks, {"p": np.zeros(3)}, state)
        assert np.array_equal(blocks["p"], before)
        assert state.step == 1
        assert np.allclose(state.m["p"], 0.0)
        assert np.allclose(state.v["p"], 0.0)

    def test_first_step_delta_is_minus_lr(self):
        # With m-hat = g and v-hat = g^2, the first update is
        # -lr * g / (|g| + eps) = -lr * sign(g), up to eps.
        blocks = boxed([0.0])
        state = init_adam(blocks, learning_rate=1e-3)
        adam_step(blocks, {"p": np.array([0.5])}, state)
        assert blocks["p"][0] == pytest.approx(-1e-3, rel=1e-6)

    def test_two_steps_match_independent_reimplementation(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        g = np.array([0.25, -1.5])
        blocks = boxed([1.0, 2.0])
        state = init_adam(blocks, learning_rate=lr)
        adam_step(blocks, {"p": g.copy()}, state)
        adam_step(blocks, {"p": g.copy()}, state)

        # Oracle: transcribe the published update rule directly.
        p = np.array([1.0, 2.0])
        m = np.zeros(2)
        v = np.zeros(2)
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert np.allclose(blocks["p"], p, atol=1e-12)
        assert np.allclose(state.m["p"], m, atol=1e-15)
        assert np.allclose(state.v["p"], v, atol=1e-15)

    def test_non_finite_gradient_aborts_without_touching_params(self):
        blocks = boxed([1.0, 2.0])
        before = blocks["p"].copy()
        state = init_adam(blocks)
        with pytest.raises(ConfigError, match="non-finite"):
            adam_step(blocks, {"p": np.array([np.nan, 1.0])}, state)
        assert np.array_equal(blocks["p"], before)
        assert state.step == 0

    def test_shape_mismatch_rejected(self):
        blocks = boxed([1.0, 2.0])
        state = init_adam(blocks)
        with pytest.raises(ConfigError, match="shape"):
            adam_step(blocks, {"p": np.zeros(3)}, state)

    def test_counter_strictly_increasing(self):
        blocks = boxed([0.0])
        state = init_adam(blocks)
        for expected in (1, 2, 3):
            adam_step(blocks, {"p": np.array([1.0])}, state)
            assert state.step == expected


class TestClip:
    def test_below_threshold_untouched(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_global_norm(grads, 10.0)
        assert norm == pytest.approx(5.0)
        assert grads["a"][0] == 3.0 and grads["b"][0] == 4.0

    def test_above_threshold_rescaled_to_max_norm(self):
        grads = {"a": np.array([30.0]), "b": np.array([40.0])}
        norm = clip_global_norm(grads, 10.0)
        assert norm == pytest.approx(50.0)
        total = np.sqrt(grads["a"][0] ** 2 + grads["b"][0] ** 2)
        assert total == pytest.approx(10.0)
        # direction preserved
        assert grads["a"][0] / grads["b"][0] == pytest.approx(0.75)

    def test_zero_gradients(self):
        grads = {"a": np.zeros(3)}
        assert clip_global_norm(grads, 1.0) == 0.0
        assert np.all(grads["a"] == 0.0)
