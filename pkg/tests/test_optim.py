"""
Tests for faalab/optim.py.
"""

import numpy as np
import pytest

from faalab import numerics as nx
from faalab.errors import ConfigError, ShapeError
from faalab.optim import AdamW


class TestAdamW:

    def test_first_step_moves_by_lr(self):
        w = nx.parameter([1.0, -2.0], "w")
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
        opt.step({"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(w.data, [0.9, -1.9], atol=1e-7)

    def test_decoupled_weight_decay(self):
        w = nx.parameter([2.0], "w")
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.5)
        opt.step({})
        np.testing.assert_allclose(w.data, [2.0 * (1 - 0.05)])

    def test_zero_gradient_without_decay_is_a_no_op(self):
        start = np.array([[0.5, -1.5], [2.0, 0.0]])
        w = nx.parameter(start.copy(), "w")
        b = nx.parameter([3.0], "b")
        opt = AdamW({"w": w, "b": b}, lr=0.1, weight_decay=0.0)
        for _ in range(3):
            opt.step({"w": np.zeros((2, 2))})
        np.testing.assert_array_equal(w.data, start)
        np.testing.assert_array_equal(b.data, [3.0])

    def test_minimises_quadratic(self):
        w = nx.parameter([5.0, -3.0], "w")
        opt = AdamW({"w": w}, lr=0.05, weight_decay=0.0)
        for _ in range(500):
            opt.step({"w": 2.0 * w.data})
        np.testing.assert_allclose(w.data, 0.0, atol=5e-2)

    def test_reset_clears_moments(self):
        w = nx.parameter([1.0], "w")
        opt = AdamW({"w": w}, lr=0.01)
        opt.step({"w": np.array([1.0])})
        opt.reset()
        assert opt.t == 0
        assert opt.m["w"][0] == 0.0 and opt.v["w"][0] == 0.0

    def test_gradient_shape_mismatch(self):
        opt = AdamW({"w": nx.parameter([1.0, 2.0], "w")})
        with pytest.raises(ShapeError):
            opt.step({"w": np.ones(3)})

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"weight_decay": -1.0}, {"beta1": 1.0}])
    def test_invalid_hyperparameters(self, kwargs):
        with pytest.raises(ConfigError):
            AdamW({"w": nx.parameter([1.0], "w")}, **kwargs)
