import math

import numpy as np
import pytest

from schrobsde.deepbsde import (NET_NAMES, NetStep, StepTargets, TerminalStep, TrainConfig, bench_runs,
                                evaluate_point, evaluate_slice, f_i_step, f_r_step, init_step, initial_step,
                                loss_and_grads, make_targets, solve, step_loss, train_step)
from schrobsde.errors import InvalidInputError, TrainingDivergenceError
from schrobsde.netcore import PARAM_NAMES, GatedNetConfig, zero_params
from schrobsde.oracles import exact_loss_order
from schrobsde.problems import SchrodingerProblem, get_problem
from schrobsde.stochastics import PathBatch, TimeGrid, euler_forward, simulate_paths


def _f_const(fr, fi):
    return lambda t, x, ur, ui: (fr, fi)


def _zero_f(t, x, ur, ui):
    return 0.0, 0.0


def constant_step(d, ur, ui, dtype=np.float64):
    v, z = GatedNetConfig.value_net(d, 2), GatedNetConfig.gradient_net(d, 2)
    nets = [zero_params(c, dtype) for c in (v, v, z, z)]
    nets[0].arrays["fuse_b"][:] = ur
    nets[1].arrays["fuse_b"][:] = ui
    return NetStep(*nets)


class TestIterationFunctions:
    def test_degenerate_step(self):
        args = dict(t=0.0, x=np.zeros(1), u_r=0.4, u_i=-0.2, zr_next=np.ones(1), zi_next=np.ones(1),
                    zr_cur=np.ones(1), zi_cur=np.ones(1), dt=0.0, dw=np.zeros(1), nu=1.0, f=_f_const(3.0, 5.0))
        assert f_r_step(**args) == 0.4
        assert f_i_step(**args) == -0.2

    def test_worked_example(self):
        common = dict(t=0.0, x=np.zeros(1), u_r=0.5, u_i=1.0, zr_next=np.array([1.0]), zi_next=np.array([2.0]),
                      zr_cur=np.array([3.0]), zi_cur=np.array([1.0]), dt=0.01, dw=np.array([0.1]), nu=1.0)
        assert f_r_step(**common, f=_f_const(0.0, 2.0)) == pytest.approx(0.77, abs=1e-12)
        assert f_i_step(**common, f=_f_const(2.0, 0.0)) == pytest.approx(1.23, abs=1e-12)

    def test_cancellations(self, rng):
        for _ in range(10):
            a, b = rng.normal(size=3), rng.normal(size=3)
            dw = rng.normal(size=3)
            kw = dict(t=0.1, x=np.zeros(3), u_r=0.3, u_i=0.7, dt=0.02, dw=dw, nu=2.0, f=_zero_f)
            assert f_r_step(zr_next=a, zi_next=-a, zr_cur=b, zi_cur=b, **kw) == pytest.approx(0.3, abs=1e-12)
            assert f_i_step(zr_next=a, zi_next=a, zr_cur=b, zi_cur=-b, **kw) == pytest.approx(0.7, abs=1e-12)


class TestTerminal:
    @pytest.mark.parametrize("name,dim", [("lin1d", None), ("nls1d", None), ("nls-manufactured", 4)])
    def test_reproduces_data(self, name, dim, rng):
        p = get_problem(name, dim=dim)
        x = rng.normal(size=(1000, p.d))
        ur, ui, zr, zi = TerminalStep(p).evaluate(x)
        gr, gi = p.g(x)
        hr, hi = p.grad_g(x)
        for a, b in ((ur, gr), (ui, gi), (zr, hr), (zi, hi)):
            assert np.array_equal(a, b)


def identical_paths(B, M, d, seed=0):
    one = simulate_paths(seed, 1, TimeGrid(M, 0.5), np.zeros(d), 1.0)
    return euler_forward(np.zeros(d), np.repeat(one.increments, B, axis=0), 1.0, TimeGrid(M, 0.5))


class TestStepLoss:
    def test_collapses_for_constants(self):
        p = get_problem("lin1d")
        grid = TimeGrid(4, 0.5)
        paths = identical_paths(8, 4, 1)
        cur, nxt = constant_step(1, 0.2, -0.1), constant_step(1, 0.7, 0.4)
        loss, _ = step_loss(1, nxt, cur, paths, p, grid)
        assert loss == pytest.approx((0.7 - 0.2) ** 2 + (0.4 + 0.1) ** 2, abs=1e-12)

    def test_zero_when_targets_reproduced(self, rng):
        p = get_problem("nls1d")
        cur = init_step(1, 3, 0, 0, "float64")
        x = rng.normal(size=(16, 1))
        dw = rng.normal(scale=0.1, size=(16, 1))
        ur, ui, zr, zi = cur.evaluate(x)
        kw = dict(t=0.1, x=x, u_r=ur, u_i=ui, zr_next=0 * zr, zi_next=0 * zi, zr_cur=zr, zi_cur=zi,
                  dt=0.02, dw=dw, nu=1.0, f=p.f)
        tg = StepTargets(x, dw, f_r_step(**kw), f_i_step(**kw), 0.1, 0.02)
        loss, _ = loss_and_grads(cur, tg, p)
        assert 0.0 <= loss < 1e-28

    def test_nonnegative(self, rng):
        p = get_problem("nls1d")
        grid = TimeGrid(4, 0.5)
        paths = simulate_paths(1, 32, grid, [0.0], 1.0)
        for s in range(5):
            loss, _ = step_loss(2, init_step(1, 2, s, 3, "float64"), init_step(1, 2, s, 2, "float64"), paths, p, grid)
            assert loss >= 0

    @pytest.mark.parametrize("name", ["lin1d", "nls1d"])
    def test_gradients_match_finite_differences(self, name):
        p = get_problem(name)
        grid = TimeGrid(4, 0.5)
        paths = simulate_paths(11, 4, grid, [0.3], 1.0)
        nxt = init_step(1, 2, 1, 3, "float64")
        cur = init_step(1, 2, 2, 2, "float64")
        for net in cur.nets().values():
            for k in PARAM_NAMES:
                if k.endswith("_b"):
                    net.arrays[k] = np.random.default_rng(7).normal(scale=0.3, size=net.arrays[k].shape)
        _, grads = step_loss(2, nxt, cur, paths, p, grid)
        h, worst = 1e-5, 0.0
        for name_, net in cur.nets().items():
            for k in PARAM_NAMES:
                arr = net.arrays[k]
                for idx in np.ndindex(arr.shape):
                    old = arr[idx]
                    arr[idx] = old + h
                    lp, _ = step_loss(2, nxt, cur, paths, p, grid, need_grads=False)
                    arr[idx] = old - h
                    lm, _ = step_loss(2, nxt, cur, paths, p, grid, need_grads=False)
                    arr[idx] = old
                    fd = (lp - lm) / (2 * h)
                    g = grads[name_][k][idx]
                    worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
                net.touch()
        assert worst <= 1e-4

    def test_collapsed_batch_gives_same_gradients(self, rng):
        p = get_problem("nls1d")
        cur = init_step(1, 3, 5, 0, "float64")
        nxt = init_step(1, 3, 6, 1, "float64")
        B = 12
        x = np.zeros((B, 1))
        dw = rng.normal(scale=0.1, size=(B, 1))
        full = make_targets(nxt, x, dw, x + dw, 0.0, 0.01, 1.0)
        coll = make_targets(nxt, x, dw, x + dw, 0.0, 0.01, 1.0, collapsed=True)
        l1, g1 = loss_and_grads(cur, full, p)
        l2, g2 = loss_and_grads(cur, coll, p)
        assert l1 == pytest.approx(l2, rel=1e-12)
        for n in NET_NAMES:
            for k in PARAM_NAMES:
                np.testing.assert_allclose(g1[n][k], g2[n][k], rtol=1e-10, atol=1e-14)

    def test_frozen_targets(self, rng):
        # once targets are built, the next step's parameters play no further role
        p = get_problem("nls1d")
        cur = init_step(1, 2, 0, 0, "float64")
        nxt = init_step(1, 2, 1, 1, "float64")
        x = rng.normal(size=(8, 1))
        dw = rng.normal(scale=0.1, size=(8, 1))
        tg = make_targets(nxt, x, dw, x + dw, 0.0, 0.01, 1.0)
        _, before = loss_and_grads(cur, tg, p)
        for net in nxt.nets().values():
            for k in PARAM_NAMES:
                net.arrays[k] += 1.0
            net.touch()
        _, after = loss_and_grads(cur, tg, p)
        assert set(before) == set(NET_NAMES)
        for n in NET_NAMES:
            for k in PARAM_NAMES:
                assert np.array_equal(before[n][k], after[n][k])

    def test_exact_solution_loss_is_second_order(self):
        losses, slope = exact_loss_order(get_problem("lin1d"), [16, 32, 64], 100_000)
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert slope >= 1.5

    def test_nan_loss_raises(self):
        p = get_problem("lin1d")
        grid = TimeGrid(2, 0.5)
        paths = simulate_paths(0, 4, grid, [0.0], 1.0)
        nxt = constant_step(1, np.nan, 0.0)
        with pytest.raises(TrainingDivergenceError):
            step_loss(0, nxt, constant_step(1, 0.0, 0.0), paths, p, grid)


TINY = TrainConfig(batch=256, epochs=2, steps_per_epoch=5, h=2, terminal_fit_steps=5)


class TestTraining:
    def test_progress_on_first_step(self):
        p = get_problem("lin1d")
        grid = TimeGrid(25, 0.5)
        cfg = TrainConfig(batch=1024, epochs=30, steps_per_epoch=5, terminal_fit_steps=0)
        log = []
        train_step(24, TerminalStep(p), cfg, p, grid, log)
        assert len(log) == 30
        assert log[-1] < log[0]

    def test_warm_start_copies_next(self):
        p = get_problem("lin1d")
        grid = TimeGrid(4, 0.5)
        nxt = init_step(1, 2, 3, 3, "float32")
        cur = initial_step(1, nxt, TINY, p, grid)
        for n in NET_NAMES:
            for k in PARAM_NAMES:
                assert np.array_equal(cur.nets()[n][k], nxt.nets()[n][k])
                assert cur.nets()[n][k] is not nxt.nets()[n][k]

    def test_cold_start_is_seeded(self):
        p = get_problem("lin1d")
        grid = TimeGrid(4, 0.5)
        cold = TrainConfig(warm_start=False, h=2)
        a = initial_step(1, init_step(1, 2, 3, 3), cold, p, grid)
        b = initial_step(1, init_step(1, 2, 4, 3), cold, p, grid)
        assert np.array_equal(a.u_r.flat(), b.u_r.flat())

    def test_deterministic(self):
        p = get_problem("nls1d")
        grid = TimeGrid(3, 0.5)
        a = train_step(2, TerminalStep(p), TINY, p, grid)
        b = train_step(2, TerminalStep(p), TINY, p, grid)
        for n in NET_NAMES:
            assert a.nets()[n].flat().tobytes() == b.nets()[n].flat().tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        base = get_problem("lin1d")
        blow = SchrodingerProblem("blowup", 1, 1.0, 0.5, lambda t, x, ur, ui: (1e30 * ur, 1e30 * ui),
                                  base.terminal, base.terminal_grad)
        with pytest.raises(TrainingDivergenceError) as err:
            solve(blow, TimeGrid(2, 0.5), TINY)
        assert err.value.step == 1

    def test_single_step_grid(self):
        p = get_problem("lin1d")
        grid = TimeGrid(1, 0.5)
        state = solve(p, grid, TINY)
        assert isinstance(state.steps[1], TerminalStep)
        assert list(state.training_log) == [0]
        # the only targets come straight from G and its gradient
        x = np.zeros((3, 1))
        dw = np.array([[0.1], [-0.2], [0.3]])
        tg = make_targets(state.steps[1], x, dw, x + dw, 0.0, 0.5, 1.0)
        gr, gi = p.g(x + dw)
        hr, hi = p.grad_g(x + dw)
        np.testing.assert_allclose(tg.y_r, gr - 0.5 * np.sum((hr + hi) * dw, axis=1))
        np.testing.assert_allclose(tg.y_i, gi + 0.5 * np.sum((hr - hi) * dw, axis=1))

    def test_horizon_mismatch(self):
        with pytest.raises(InvalidInputError):
            solve(get_problem("lin1d"), TimeGrid(2, 1.0), TINY)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            TrainConfig(batch=0)
        with pytest.raises(InvalidInputError):
            TrainConfig(epochs=0)
        with pytest.raises(InvalidInputError):
            TrainConfig(lr=-1.0)


class TestEvaluation:
    def _zero_state(self, name="lin1d", dim=None):
        p = get_problem(name, dim=dim)
        grid = TimeGrid(2, 0.5)
        state = solve(p, grid, TINY)
        state.steps[0] = constant_step(p.d, 0.0, 0.0, np.float32)
        return state

    def test_zero_nets_give_zero(self):
        v = evaluate_point(self._zero_state())
        assert (v.re, v.im) == (0.0, 0.0)

    def test_slice_axes(self):
        state = self._zero_state("nls-manufactured", 3)
        grid = np.linspace(-1, 1, 5)
        tab = evaluate_slice(state, "diag", grid)
        assert tab.shape == (5, 5)
        tr, ti = state.problem.exact(0.0, np.repeat(grid[:, None], 3, axis=1))
        np.testing.assert_allclose(tab[:, 1], tr)
        np.testing.assert_allclose(tab[:, 2], ti)
        e1 = evaluate_slice(state, "e1", grid)
        pts = np.zeros((5, 3))
        pts[:, 0] = grid
        np.testing.assert_allclose(e1[:, 1], state.problem.exact(0.0, pts)[0])
        with pytest.raises(InvalidInputError):
            evaluate_slice(state, "x2", grid)

    def test_bench_identical_seeds(self):
        p = get_problem("lin1d")
        res = bench_runs(p, TimeGrid(2, 0.5), TINY, runs=2, seeds=[5, 5])
        assert (res.std.re, res.std.im) == (0.0, 0.0)
        assert res.rel_error is not None and math.isfinite(res.rel_error)

    def test_bench_needs_two_runs(self):
        with pytest.raises(InvalidInputError):
            bench_runs(get_problem("lin1d"), TimeGrid(2, 0.5), TINY, runs=1)
