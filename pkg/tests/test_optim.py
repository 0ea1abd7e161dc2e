"""Adam optimizer and plateau learning-rate scheduler."""

import numpy as np
import pytest

from embolite.nn import Adam, PlateauScheduler
from embolite.tensor import Tensor


def _param(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = _param([1.0, -2.0])
        opt = Adam([("p", p)], lr=1e-3, weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_none_gradient_skipped(self):
        p = _param([1.0])
        opt = Adam([("p", p)], lr=1e-3)
        opt.step()
        assert np.array_equal(p.data, [1.0])

    def test_first_step_is_lr_times_sign(self):
        # bias correction makes the first update lr * g / (|g| + eps)
        p = _param([0.5])
        opt = Adam([("p", p)], lr=1e-3, weight_decay=0.0)
        p.grad = np.array([1.0])
        opt.step()
        assert abs((0.5 - p.data[0]) - 1e-3) < 1e-9

    def test_decoupled_weight_decay(self):
        p = _param([2.0])
        opt = Adam([("p", p)], lr=0.1, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step()
        # decay shrinks the weight even with zero gradient (then zero Adam update)
        assert abs(p.data[0] - 2.0 * (1 - 0.1 * 0.5)) < 1e-12

    def test_descent_on_quadratic(self):
        p = _param([1.0])
        opt = Adam([("p", p)], lr=1e-3, weight_decay=0.0)
        values = [p.data[0]]
        for _ in range(100):
            p.grad = 2.0 * p.data  # d/dx x^2
            opt.step()
            values.append(p.data[0])
        absolutes = [abs(v) for v in values]
        assert all(b < a for a, b in zip(absolutes[:-1], absolutes[1:]))

    def test_nan_gradient_aborts_with_name(self):
        p = _param([1.0])
        opt = Adam([("layer.weight", p)], lr=1e-3)
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="layer.weight"):
            opt.step()

    def test_step_counter_increments(self):
        p = _param([1.0])
        opt = Adam([("p", p)], lr=1e-3)
        for expected in (1, 2, 3):
            p.grad = np.array([1.0])
            opt.step()
            assert opt.step_count == expected


class TestPlateauScheduler:
    def test_improving_metric_keeps_lr(self):
        opt = Adam([], lr=1e-3)
        sched = PlateauScheduler(opt, patience=2, decay_factor=0.1, min_lr=1e-6)
        for metric in (1.0, 0.9, 0.8, 0.7):
            sched.step(metric)
        assert opt.learning_rate == 1e-3

    def test_exactly_one_decay_after_patience(self):
        opt = Adam([], lr=1e-3)
        sched = PlateauScheduler(opt, patience=2, decay_factor=0.1, min_lr=1e-9)
        sched.step(1.0)
        for _ in range(3):
            sched.step(1.0)  # three non-improving epochs, patience 2
        assert abs(opt.learning_rate - 1e-4) < 1e-15

    def test_min_lr_floor(self):
        opt = Adam([], lr=1e-5)
        sched = PlateauScheduler(opt, patience=1, decay_factor=0.1, min_lr=1e-6)
        for _ in range(5):
            sched.step(1.0)
        assert opt.learning_rate == 1e-6

    def test_lr_never_increases(self):
        opt = Adam([], lr=1e-3)
        sched = PlateauScheduler(opt, patience=1, decay_factor=0.5, min_lr=1e-8)
        rng = np.random.default_rng(0)
        last = opt.learning_rate
        for _ in range(30):
            sched.step(rng.uniform(0.0, 1.0))
            assert opt.learning_rate <= last
            last = opt.learning_rate

    def test_invalid_decay_factor(self):
        with pytest.raises(ValueError):
            PlateauScheduler(Adam([], lr=1e-3), decay_factor=1.5)
