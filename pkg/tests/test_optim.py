"""AdamW recursions, CLR triangle wave, and convergence-window counting."""

import numpy as np
import pytest

from gradedvi.diffkernel import parameter
from gradedvi.optim import AdamW, ClrSchedule, ConvergenceMonitor, NumericalError, clr_lr


class TestAdamW:
    def test_defaults(self):
        opt = AdamW([])
        assert opt.beta1 == 0.9
        assert opt.beta2 == 0.999
        assert opt.weight_decay == 0.01
        assert opt.eps == 1e-8

    def test_first_step_moments(self):
        p = parameter([[1.0, -2.0]])
        g = np.array([[0.5, 2.0]])
        p.grad = g.copy()
        opt = AdamW([p])
        opt.step(lr=0.001)
        np.testing.assert_allclose(opt._m[0], 0.1 * g, atol=1e-15)
        np.testing.assert_allclose(opt._v[0], 0.001 * g * g, atol=1e-15)

    def test_null_update(self):
        p = parameter([[3.0, -1.0]])
        p.grad = np.zeros((1, 2))
        opt = AdamW([p], weight_decay=0.0)
        before = p.data.copy()
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, before)

    def test_lambda_zero_matches_hand_computed_adam(self):
        # one step on a 3-parameter example, worked by hand
        w0 = np.array([[0.5, -1.0, 2.0]])
        g = np.array([[0.2, -0.4, 1.0]])
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        mhat = m / (1 - b1)
        vhat = v / (1 - b2)
        expected = w0 - lr * mhat / (np.sqrt(vhat) + eps)

        p = parameter(w0.copy())
        p.grad = g.copy()
        opt = AdamW([p], weight_decay=0.0)
        opt.step(lr=lr)
        np.testing.assert_allclose(p.data, expected, atol=1e-12)

    def test_decay_term_applied(self):
        p = parameter([[10.0]])
        p.grad = np.zeros((1, 1))
        opt = AdamW([p], weight_decay=0.01)
        opt.step(lr=0.1)
        np.testing.assert_allclose(p.data, [[10.0 - 0.1 * 0.01 * 10.0]], atol=1e-15)

    def test_update_magnitude_bound(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            p = parameter(rng.normal(size=(2, 3)))
            opt = AdamW([p], weight_decay=0.01)
            lr = 10 ** rng.uniform(-4, -1)
            for _ in range(5):
                p.grad = rng.normal(size=(2, 3)) * 10 ** rng.uniform(-2, 2)
                before = p.data.copy()
                opt.step(lr)
                bound = lr * (1.0 / (1.0 - opt.beta1) + opt.weight_decay * np.max(np.abs(before)))
                assert np.max(np.abs(p.data - before)) <= bound + 1e-12

    def test_nonfinite_gradient_names_parameter(self):
        p = parameter([[1.0]], name="loadings_raw")
        p.grad = np.array([[np.nan]])
        opt = AdamW([p])
        with pytest.raises(NumericalError, match="loadings_raw"):
            opt.step(0.001)


class TestClr:
    def test_cycle_start_is_base(self):
        s = ClrSchedule(base_lr=0.001, step_size=100)
        assert clr_lr(0, s) == 0.001

    def test_cycle_peak_is_max(self):
        s = ClrSchedule(base_lr=0.001, step_size=100)
        assert clr_lr(100, s) == pytest.approx(0.005)

    def test_default_max_is_five_times_base(self):
        s = ClrSchedule(base_lr=0.002)
        assert s.max_lr == pytest.approx(0.01)

    def test_periodicity(self):
        s = ClrSchedule(base_lr=0.001, step_size=37)
        for t in range(300):
            assert clr_lr(t, s) == pytest.approx(clr_lr(t + 2 * 37, s))

    def test_bounds_over_many_steps(self):
        s = ClrSchedule(base_lr=0.003, step_size=111)
        t = np.arange(1_000_000)
        pos = t % (2 * s.step_size) / s.step_size
        frac = np.where(pos > 1.0, 2.0 - pos, pos)
        lrs = s.base_lr + (s.max_lr - s.base_lr) * frac
        assert lrs.min() >= s.base_lr - 1e-15
        assert lrs.max() <= s.max_lr + 1e-15
        # spot-check the vectorized reference against the implementation
        for probe in (0, 1, 110, 111, 112, 221, 222, 999_999):
            assert clr_lr(int(probe), s) == pytest.approx(lrs[probe])


class TestConvergenceMonitor:
    def test_strictly_increasing_never_converges(self):
        mon = ConvergenceMonitor(patience=5, min_delta=1e-3)
        for k in range(100):
            assert mon.update(float(k)) == "continue"

    def test_constant_trace_converges_after_patience_flat_windows(self):
        mon = ConvergenceMonitor(patience=7, min_delta=1e-3)
        assert mon.update(1.0) == "continue"  # establishes the baseline
        outcomes = [mon.update(1.0) for _ in range(7)]
        assert outcomes[:-1] == ["continue"] * 6
        assert outcomes[-1] == "converged"

    def test_single_improvement_resets_counter(self):
        mon = ConvergenceMonitor(patience=3, min_delta=1e-3)
        mon.update(0.0)
        mon.update(0.0)
        mon.update(0.0)
        assert mon.windows_since_improvement == 2
        assert mon.update(1.0) == "continue"
        assert mon.windows_since_improvement == 0
        assert mon.update(1.0) == "continue"
        assert mon.update(1.0) == "continue"
        assert mon.update(1.0) == "converged"

    def test_sub_delta_gain_is_not_improvement(self):
        mon = ConvergenceMonitor(patience=2, min_delta=1e-3)
        mon.update(0.0)
        assert mon.update(0.0005) == "continue"
        assert mon.update(0.0009) == "converged"
