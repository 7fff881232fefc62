import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schrobsde.errors import InvalidInputError, StaleTapeError
from schrobsde.netcore import (PARAM_NAMES, AdamState, GatedNetConfig, adam_step, gate_value, net_backward,
                               net_forward, net_init, softplus, zero_params)


def finite_difference_check(params, x, upstream, step=1e-5):
    """Largest relative deviation between reverse-mode and central-difference gradients."""
    _, tape = net_forward(params, x, record=True)
    grads = net_backward(tape, upstream)
    worst = 0.0
    for name in PARAM_NAMES:
        arr = params.arrays[name]
        fd = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            plus = np.sum(upstream * net_forward(params, x))
            arr[idx] = old - step
            minus = np.sum(upstream * net_forward(params, x))
            arr[idx] = old
            fd[idx] = (plus - minus) / (2 * step)
        params.touch()
        err = np.abs(grads[name] - fd) / np.maximum(np.maximum(np.abs(grads[name]), np.abs(fd)), 1e-6)
        worst = max(worst, float(err.max()))
    return worst


class TestConfig:
    def test_widths(self):
        assert GatedNetConfig.value_net(1, 10).hidden == 11
        assert GatedNetConfig.gradient_net(8, 3).hidden == 24
        assert GatedNetConfig.gradient_net(8, 3).out_dim == 8

    def test_parameter_count(self):
        cfg = GatedNetConfig.value_net(1, 10)
        branch = 1 * 11 + 11 + 11 * 11 + 11
        assert cfg.n_params() == 2 * branch + (1 + 1) + (11 + 1)

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            GatedNetConfig(in_dim=2, out_dim=3, hidden=4, h=1)
        with pytest.raises(InvalidInputError):
            GatedNetConfig(in_dim=0, out_dim=1, hidden=4, h=1)


class TestInit:
    def test_deterministic(self):
        cfg = GatedNetConfig.gradient_net(3, 2)
        a, b = net_init(cfg, 9), net_init(cfg, 9)
        for k in PARAM_NAMES:
            assert np.array_equal(a[k], b[k])
        assert not np.array_equal(a["a1_w"], net_init(cfg, 10)["a1_w"])

    def test_glorot_bounds(self):
        cfg = GatedNetConfig.value_net(4, 6)
        p = net_init(cfg, 0)
        for name in ("a1_w", "a2_w", "b2_w", "fuse_w", "gate_w"):
            fan_in, fan_out = p[name].shape
            assert np.all(np.abs(p[name]) <= np.sqrt(6.0 / (fan_in + fan_out)))
        assert np.all(np.abs(p["b1_w"]) <= np.sqrt(3.0 / 4))
        for name in PARAM_NAMES:
            if name.endswith("_b"):
                assert np.all(p[name] == 0)

    def test_sine_branch_preactivation_scale(self):
        p = net_init(GatedNetConfig.value_net(4, 60), 1)
        z = np.random.default_rng(0).normal(size=(4000, 4)) @ p["b1_w"]
        assert 0.5 < z.var() < 2.0


class TestForward:
    def test_zero_weights_give_bias(self):
        cfg = GatedNetConfig.gradient_net(3, 2)
        p = zero_params(cfg)
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert np.all(net_forward(p, x) == 0)
        p.arrays["fuse_b"][:] = [1.0, -2.0, 0.5]
        np.testing.assert_array_equal(net_forward(p, x), np.tile([1.0, -2.0, 0.5], (5, 1)))

    def test_shapes(self):
        x = np.zeros((7, 3))
        assert net_forward(net_init(GatedNetConfig.value_net(3, 2), 0), x).shape == (7, 1)
        assert net_forward(net_init(GatedNetConfig.gradient_net(3, 2), 0), x).shape == (7, 3)
        assert net_forward(net_init(GatedNetConfig.value_net(3, 2), 0), np.zeros(3)).shape == (1, 1)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            net_forward(net_init(GatedNetConfig.value_net(3, 2), 0), np.zeros((2, 4)))

    def test_saturated_gate_selects_tanh_branch(self):
        cfg = GatedNetConfig.value_net(2, 3)
        p = net_init(cfg, 4)
        p.arrays["gate_b"][:] = 50.0
        x = np.random.default_rng(1).normal(size=(6, 2))
        alpha, beta = gate_value(p, x)
        assert np.all(beta > 0) and np.all(beta < 1e-20)
        assert np.all(alpha > 1 - 1e-15)
        a = np.tanh(softplus(x @ p["a1_w"] + p["a1_b"]) @ p["a2_w"] + p["a2_b"])
        expected = a @ p["fuse_w"] + p["fuse_b"]
        np.testing.assert_allclose(net_forward(p, x), expected, rtol=1e-12, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1e6, 1e6), st.floats(-1e3, 1e3), st.integers(0, 2**31))
    def test_gate_strictly_inside_unit_interval(self, bias, x, seed):
        p = net_init(GatedNetConfig.value_net(1, 2), seed)
        p.arrays["gate_b"][:] = bias
        alpha, beta = gate_value(p, np.array([[x]]))
        # alpha and its complement 1 - alpha are both strictly positive
        assert alpha[0] > 0 and beta[0] > 0
        assert alpha[0] <= 1 and beta[0] <= 1

    def test_softplus_is_stable(self):
        z = np.array([-1000.0, -40.0, 0.0, 40.0, 1000.0])
        out = softplus(z)
        assert np.all(np.isfinite(out))
        assert out[-1] == 1000.0
        assert out[2] == pytest.approx(np.log(2.0))


class TestBackward:
    def test_zero_upstream(self):
        p = net_init(GatedNetConfig.gradient_net(2, 3), 0)
        x = np.random.default_rng(0).normal(size=(4, 2))
        _, tape = net_forward(p, x, record=True)
        grads = net_backward(tape, np.zeros((4, 2)))
        assert all(np.all(g == 0) for g in grads.values())

    def test_fusion_bias_gradient_is_upstream(self):
        p = net_init(GatedNetConfig.gradient_net(2, 3), 0)
        for k in PARAM_NAMES:
            p.arrays[k] *= 1e-6
        up = np.array([[0.3, -1.7]])
        _, tape = net_forward(p, np.array([[0.1, 0.2]]), record=True)
        np.testing.assert_array_equal(net_backward(tape, up)["fuse_b"], up[0])

    def test_stale_tape(self):
        p = net_init(GatedNetConfig.value_net(2, 3), 0)
        _, tape = net_forward(p, np.zeros((1, 2)), record=True)
        adam_step(p, {k: np.ones_like(v) for k, v in p.arrays.items()}, AdamState())
        with pytest.raises(StaleTapeError):
            net_backward(tape, np.ones((1, 1)))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for trial in range(50):
            cfg = GatedNetConfig.value_net(2, 3) if trial % 2 else GatedNetConfig.gradient_net(2, 3)
            p = net_init(cfg, int(rng.integers(2**31)))
            for k in PARAM_NAMES:
                if k.endswith("_b"):
                    p.arrays[k] = rng.normal(scale=0.5, size=p.arrays[k].shape)
            x = rng.normal(size=(3, 2))
            up = rng.normal(size=(3, cfg.out_dim))
            worst = max(worst, finite_difference_check(p, x, up))
        assert worst <= 1e-4

    def test_deterministic(self):
        p = net_init(GatedNetConfig.gradient_net(3, 2), 5)
        x = np.random.default_rng(3).normal(size=(10, 3))
        up = np.random.default_rng(4).normal(size=(10, 3))
        g1 = net_backward(net_forward(p, x, record=True)[1], up)
        g2 = net_backward(net_forward(p, x, record=True)[1], up)
        for k in PARAM_NAMES:
            assert np.array_equal(g1[k], g2[k])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = net_init(GatedNetConfig.value_net(2, 2), 0)
        before = p.flat().copy()
        adam_step(p, {k: np.zeros_like(v) for k, v in p.arrays.items()}, AdamState())
        assert np.array_equal(p.flat(), before)

    def test_first_step_moves_by_lr(self):
        p = net_init(GatedNetConfig.value_net(2, 2), 0)
        before = {k: v.copy() for k, v in p.arrays.items()}
        grads = {k: np.full_like(v, -3.0 if i % 2 else 0.25) for i, (k, v) in enumerate(p.arrays.items())}
        adam_step(p, grads, AdamState(), lr=1e-3)
        for k in p.arrays:
            np.testing.assert_allclose(p[k] - before[k], -1e-3 * np.sign(grads[k]), rtol=1e-4)

    def test_deterministic(self):
        results = []
        for _ in range(2):
            p = net_init(GatedNetConfig.value_net(2, 2), 0)
            st_ = AdamState()
            g = {k: np.full_like(v, 0.1) for k, v in p.arrays.items()}
            for _ in range(3):
                adam_step(p, g, st_, lr=0.01)
            results.append(p.flat())
        assert np.array_equal(*results)

    def test_rejects_bad_lr(self):
        p = net_init(GatedNetConfig.value_net(2, 2), 0)
        with pytest.raises(InvalidInputError):
            adam_step(p, {}, AdamState(), lr=0.0)
