import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

import pathxva.absde as absde
from pathxva.absde import (AbsdeProblem, PathArray, RollingWindow, Schedule, direct_window_sum,
                           read_csv, save_solution, solve_explicit, time0_estimate, window_labels)
from pathxva.nn import TrainConfig, TrainingDivergence

FAST = TrainConfig(epochs=4, batch_size=512, learning_rate=1e-2)


def brownian_paths(n_paths, n, dt, seed=0):
    rng = np.random.default_rng(seed)
    inc = rng.normal(scale=np.sqrt(dt), size=(n_paths, n))
    return np.concatenate([np.zeros((n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)


def linear_problem(c, phi=1.0, increment=None):
    return AbsdeProblem(dim=1, terminal=lambda s: np.full((s.n_samples, 1), phi),
                        driver=lambda i, t, s, y, rho: -c * y, increment=increment)


class TestWindow:
    @given(st.integers(1, 12), st.integers(1, 20), st.integers(0, 2**31))
    def test_rolling_equals_direct_on_integers(self, m, n, seed):
        # integer-valued increments make floating sums order-independent, so equality is exact
        inc = np.random.default_rng(seed).integers(-1000, 1000, size=(n, 5)).astype(float)
        for i in range(n):
            assert np.array_equal(window_labels(inc, i, m, n), direct_window_sum(inc, i, m, n))

    @given(arrays(np.float64, (15, 3), elements=st.floats(-1e6, 1e6)), st.integers(1, 15))
    def test_rolling_equals_direct_on_floats(self, inc, m):
        win = RollingWindow(m, 3)
        for i in range(14, -1, -1):
            total = win.push(inc[i])
            direct = direct_window_sum(inc, i, m, 15)
            assert np.allclose(total, direct, rtol=1e-9, atol=1e-9 * np.abs(inc).max(initial=1.0))
            assert np.allclose(win.direct_sum(), direct, rtol=1e-9, atol=1e-9 * np.abs(inc).max(initial=1.0))

    def test_clamped_window_is_suffix_sum(self):
        inc = np.arange(10.0)
        assert window_labels(inc, 6, 100, 10) == inc[6:].sum()

    def test_unit_increments(self):
        ones = np.ones(10)
        assert [window_labels(ones, i, 3, 10) for i in range(10)] == [3.0] * 8 + [2.0, 1.0]

    def test_invalid_length(self):
        with pytest.raises(ValueError):
            RollingWindow(0, 3)


class TestProblem:
    def test_validation(self):
        with pytest.raises(ValueError):
            AbsdeProblem(dim=0, terminal=None, driver=None)
        with pytest.raises(ValueError):
            AbsdeProblem(dim=1, terminal=None, driver=None, alpha=0.4)
        with pytest.raises(ValueError):
            AbsdeProblem(dim=1, terminal=None, driver=None, lipschitz_f=-1)

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            Schedule(0, 0.1, 1)


class TestSolver:
    def test_null_problem(self):
        paths = PathArray(brownian_paths(1024, 8, 0.125))
        prob = AbsdeProblem(dim=1, terminal=lambda s: np.zeros((s.n_samples, 1)),
                            driver=lambda i, t, s, y, rho: np.zeros_like(y),
                            increment=lambda i, s, dm: np.zeros(s.n_samples))
        out = solve_explicit(prob, paths, Schedule(8, 0.125, 8), FAST)
        assert np.all(out.y == 0) and np.all(out.rho == 0) and np.all(out.var == 0)
        assert time0_estimate(prob, out, paths)[0] == 0.0

    def test_window_clamping_on_unit_increments(self):
        n, m = 8, 3
        paths = PathArray(brownian_paths(1024, n, 0.125))
        prob = AbsdeProblem(dim=1, terminal=lambda s: np.zeros((s.n_samples, 1)),
                            driver=lambda i, t, s, y, rho: np.zeros_like(y),
                            increment=lambda i, s, dm: np.ones(s.n_samples))
        out = solve_explicit(prob, paths, Schedule(n, 0.125, m), FAST)
        expected = [min(m, n - i) for i in range(n)] + [0]
        assert np.allclose(out.rho, np.array(expected)[:, None], atol=1e-9)

    def test_linear_driver(self):
        c, n, T = 0.5, 16, 1.0
        paths = PathArray(brownian_paths(2048, n, T / n))
        out = solve_explicit(linear_problem(c), paths, Schedule(n, T / n, 4), FAST)
        assert out.y0[0] == pytest.approx((1 - c * T / n) ** n, rel=1e-6)
        assert abs(out.y0[0] / np.exp(-c * T) - 1) < 0.01

    def test_martingale_projection(self):
        n, dt = 8, 0.125
        x = brownian_paths(8192, n, dt, seed=1)
        prob = AbsdeProblem(dim=1, terminal=lambda s: s.paths[:, -1, :].copy(),
                            driver=lambda i, t, s, y, rho: np.zeros_like(y))
        cfg = TrainConfig(epochs=16, batch_size=512, learning_rate=1e-2, lr_schedule="linear")
        out = solve_explicit(prob, PathArray(x), Schedule(n, dt, 8), cfg)
        for i in (2, 4, 7):
            err = np.sqrt(np.mean((out.y[i, :, 0] - x[:, i]) ** 2))
            # fit error relative to the label noise left after conditioning on step i
            assert err < 0.05 * np.sqrt((n - i) * dt)
        assert abs(out.y0[0]) < 3 * x[:, -1].std() / np.sqrt(len(x))

    def test_martingale_telescoping(self):
        c, n = 0.3, 8
        paths = PathArray(brownian_paths(1024, n, 0.125))
        out = solve_explicit(linear_problem(c, phi=2.0), paths, Schedule(n, 0.125, 2), FAST)
        assert np.all(out.martingale[n] == 0)
        acc = np.zeros(1024)
        for i in range(n - 1, -1, -1):
            xi = out.y[i + 1, :, 0] + (-c * out.y[i + 1, :, 0]) * 0.125
            acc = acc + out.y[i, :, 0] - xi
            assert np.array_equal(out.martingale[i, :, 0], acc)

    def test_driver_reads_next_step_rho_only(self):
        seen = []
        n = 6

        def driver(i, t, s, y, rho):
            seen.append((i, rho.copy()))
            return np.zeros_like(y)

        rng = np.random.default_rng(3)
        noise = rng.normal(size=(1024, n))
        paths = PathArray(brownian_paths(1024, n, 0.25))
        prob = AbsdeProblem(dim=1, terminal=lambda s: np.zeros((s.n_samples, 1)), driver=driver,
                            increment=lambda i, s, dm: noise[:, i])
        out = solve_explicit(prob, paths, Schedule(n, 0.25, 2), FAST)
        for i, rho in seen:
            assert np.array_equal(rho, out.rho[i + 1])

    def test_warm_start_passes_previous_heads(self, monkeypatch):
        calls = []
        real = absde.nn_regress

        def spy(x, y, cfg, init=None):
            head = real(x, y, cfg, init=init)
            calls.append((init, head))
            return head

        monkeypatch.setattr(absde, "nn_regress", spy)
        n = 4
        paths = PathArray(brownian_paths(1024, n, 0.25))
        noise = np.random.default_rng(0).normal(size=(1024, n))
        prob = AbsdeProblem(dim=1, terminal=lambda s: s.paths[:, -1, :] ** 2, increment=lambda i, s, dm: noise[:, i],
                            driver=lambda i, t, s, y, rho: np.zeros_like(y))
        out = solve_explicit(prob, paths, Schedule(n, 0.25, 2), FAST)
        # per step: Y head, VaR head, ES head; the first trained step starts cold
        assert all(init is None for init, _ in calls[:3])
        for k, i in enumerate(range(n - 2, 0, -1)):
            prev = out.heads[i + 1]
            inits = [c[0] for c in calls[3 * (k + 1): 3 * (k + 2)]]
            assert inits[0] is prev.y[0].params
            assert inits[1] is prev.var.params
            assert inits[2] is prev.es.params

    def test_tail_ordering(self):
        n = 4
        x = brownian_paths(4096, n, 0.25, seed=5)
        noise = np.random.default_rng(6).normal(size=(4096, n))
        prob = AbsdeProblem(dim=1, terminal=lambda s: np.zeros((s.n_samples, 1)),
                            driver=lambda i, t, s, y, rho: np.zeros_like(y),
                            increment=lambda i, s, dm: s.paths[:, i, 0] + noise[:, i])
        out = solve_explicit(prob, PathArray(x), Schedule(n, 0.25, 2), FAST)
        for i in range(1, n):
            assert np.mean(out.rho[i] >= out.var[i]) >= 0.95

    def test_divergence_names_step_and_head(self):
        paths = PathArray(brownian_paths(512, 4, 0.25))
        prob = AbsdeProblem(dim=1, terminal=lambda s: 1e3 * s.paths[:, -1, :] ** 3,
                            driver=lambda i, t, s, y, rho: np.zeros_like(y), names=("price",))
        cfg = TrainConfig(optimizer="sgd", learning_rate=1e6, batch_size=128, epochs=2)
        with pytest.raises(TrainingDivergence, match="step 3, head price"):
            solve_explicit(prob, paths, Schedule(4, 0.25, 1), cfg)

    def test_summary_export(self, tmp_path):
        paths = PathArray(brownian_paths(1024, 4, 0.25))
        out = solve_explicit(linear_problem(0.1), paths, Schedule(4, 0.25, 1), FAST)
        path = save_solution(out, tmp_path / "sol", header={"seed": 1})
        rows = read_csv(path)
        assert {r["metric"] for r in rows} == {"y0", "rho"}
        assert set(rows[0]) >= {"mean", "std", "q05", "q25", "q50", "q75", "q95"}
        assert (tmp_path / "sol_heads.json").exists()
        assert path.read_text().startswith("# seed=1")
