import numpy as np
import pytest

from cellflow import dynamics as dyn
from cellflow.numerics import make_rng, mlp_init, mlp_grad, mlp_zeros, softplus
from oracles import central_diff


def zero_model(d=2, mode="ode", beta=0.0, gamma=0.9):
    m = dyn.DynamicsModel(
        drift=mlp_zeros((d + 1, 4, d), ("tanh", "identity")),
        diffusion=mlp_zeros((d + 1, 4, d), ("tanh", "softplus")),
        growth=mlp_zeros((d + 1, 4, 1), ("tanh", "softplus")),
        momentum_beta=beta, momentum_gamma=gamma, mode=mode)
    return m


def linear_drift_model(A, b, mode="ode", beta=0.0, gamma=0.9, sigma=0.1):
    d = len(b)
    m = dyn.make_dynamics_model(d, hidden=(4,), seed=0, momentum_beta=beta,
                                momentum_gamma=gamma, mode=mode, sigma_init=sigma)
    m.drift = mlp_zeros((d + 1, d), ("identity",))
    m.drift.weights[0][:, :d] = A
    m.drift.biases[0][:] = b
    return m


class TestHeads:
    def test_zero_weights_softplus_at_zero(self):
        m = zero_model()
        z = np.array([0.3, -0.2])
        np.testing.assert_array_equal(dyn.eval_drift(m, z, 0.5), np.zeros(2))
        np.testing.assert_allclose(dyn.eval_diffusion(m, z, 0.5),
                                   np.log(2.0) * np.ones(2), atol=1e-12)
        assert dyn.eval_growth(m, z, 0.5) == pytest.approx(np.log(2.0))

    def test_growth_bias_init_near_one(self):
        m = dyn.make_dynamics_model(2, hidden=(8,), seed=1, growth_bias=1.0)
        g = dyn.eval_growth(m, np.zeros(2), 0.0)
        assert g == pytest.approx(1.0, abs=0.15)

    @pytest.mark.parametrize("head", ["drift", "diffusion", "growth"])
    def test_head_gradients_match_fd(self, head):
        m = dyn.make_dynamics_model(2, hidden=(6,), seed=2)
        mlp = getattr(m, head)
        rng = make_rng(40, 0)
        x = rng.standard_normal(3)
        u = rng.standard_normal(mlp.layer_sizes[-1])
        grads, gin = mlp_grad(mlp, x, u)
        from cellflow.numerics import mlp_forward
        fd = central_diff(lambda xx: float(u @ np.atleast_1d(mlp_forward(mlp, xx))), x.copy())
        np.testing.assert_allclose(gin, fd, rtol=1e-4, atol=1e-8)


class TestIntegrate:
    def test_constant_field_exact_endpoint(self):
        m = linear_drift_model(np.zeros((2, 2)), np.array([1.5, -0.5]),
                               beta=0.37, gamma=0.8)
        tb = dyn.integrate(m, np.zeros((3, 2)), 0.0, 2.0, 7)
        np.testing.assert_allclose(tb.endpoints,
                                   np.tile([3.0, -1.0], (3, 1)), atol=1e-12)

    def test_rk4_exponential_decay(self):
        m = linear_drift_model(-np.eye(2), np.zeros(2))
        z0 = np.array([[1.0, 2.0]])
        tb = dyn.integrate(m, z0, 0.0, 1.0, 20, method="rk4")
        np.testing.assert_allclose(tb.endpoints[0], np.exp(-1.0) * z0[0], atol=1e-6)

    def test_rk4_observed_order(self):
        rng = make_rng(41, 0)
        m = dyn.make_dynamics_model(2, hidden=(8,), seed=3)
        z0 = rng.standard_normal((4, 2))
        ends = {}
        for n in (10, 20, 40):
            ends[n] = dyn.integrate(m, z0, 0.0, 1.0, n, method="rk4").endpoints
        ref = dyn.integrate(m, z0, 0.0, 1.0, 640, method="rk4").endpoints
        e10 = np.abs(ends[10] - ref).max()
        e20 = np.abs(ends[20] - ref).max()
        order = np.log2(e10 / e20)
        assert order >= 3.5

    def test_sde_one_step_variance(self):
        s = 0.7
        m = zero_model(mode="sde")
        m.diffusion = mlp_zeros((3, 2), ("softplus",))
        m.diffusion.biases[0][:] = np.log(np.expm1(s))  # softplus^-1(s)
        h = 0.25
        z0 = np.zeros((10000, 2))
        tb = dyn.integrate(m, z0, 0.0, h, 1, rng=make_rng(42, 0))
        var = tb.endpoints.var(axis=0)
        np.testing.assert_allclose(var, s * s * h, rtol=0.05)

    def test_beta_zero_reproduces_raw_field(self):
        rng = make_rng(43, 0)
        m0 = dyn.make_dynamics_model(2, hidden=(8,), seed=4, momentum_beta=0.0)
        z0 = rng.standard_normal((3, 2))
        a = dyn.integrate(m0, z0, 0.0, 1.0, 12).paths
        # manual Euler on the raw drift
        z = z0.copy()
        for k in range(12):
            z = z + (1.0 / 12) * dyn.eval_drift(m0, z, k / 12)
        np.testing.assert_allclose(a[:, -1], z, atol=1e-12)

    def test_mode_flag_controls_stochasticity_not_weights(self):
        # ode mode is bitwise deterministic even with nonzero diffusion weights
        m = dyn.make_dynamics_model(2, hidden=(8,), seed=5, mode="ode", sigma_init=0.5)
        z0 = make_rng(44, 0).standard_normal((4, 2))
        a = dyn.integrate(m, z0, 0.0, 1.0, 10).paths
        b = dyn.integrate(m, z0, 0.0, 1.0, 10).paths
        np.testing.assert_array_equal(a, b)
        # sde mode with ZERO diffusion weights still diffuses: softplus(0) > 0
        mz = zero_model(mode="sde")
        tb = dyn.integrate(mz, z0, 0.0, 1.0, 10, rng=make_rng(44, 1))
        assert not np.allclose(tb.paths, np.repeat(z0[:, None, :], 11, axis=1))

    def test_sde_requires_rng(self):
        m = zero_model(mode="sde")
        with pytest.raises(ValueError):
            dyn.integrate(m, np.zeros((2, 2)), 0.0, 1.0, 3)

    def test_sde_rejects_rk4(self):
        m = zero_model(mode="sde")
        with pytest.raises(ValueError):
            dyn.integrate(m, np.zeros((2, 2)), 0.0, 1.0, 3,
                          rng=make_rng(0), method="rk4")

    def test_drift_evals_match_recomputation(self):
        m = dyn.make_dynamics_model(2, hidden=(8,), seed=6, momentum_beta=0.5)
        z0 = make_rng(45, 0).standard_normal((3, 2))
        tb = dyn.integrate(m, z0, 0.0, 1.0, 8)
        for k in range(8):
            want = dyn.eval_drift(m, tb.paths[:, k], tb.times[k])
            np.testing.assert_allclose(tb.drift_evals[:, k], want, atol=1e-12)


def rollout_loss(model, z0, mode, method, W, V, seed=777):
    rng = make_rng(seed) if mode == "sde" else None
    tb = dyn.integrate(model, z0, 0.0, 1.0, 5, rng=rng, method=method)
    return float(np.sum(tb.paths * W) + np.sum(tb.drift_evals * V)), tb


class TestBackprop:
    def test_zero_upstream_zero_grads(self):
        m = dyn.make_dynamics_model(2, hidden=(6,), seed=7)
        tb = dyn.integrate(m, np.zeros((3, 2)), 0.0, 1.0, 4)
        grads, dz0 = dyn.backprop_integrate(m, tb, np.zeros_like(tb.paths))
        assert all(np.all(g == 0) for g in grads["drift"])
        assert np.all(dz0 == 0)

    def test_single_euler_step_is_scaled_mlp_grad(self):
        m = dyn.make_dynamics_model(2, hidden=(6,), seed=8)
        z0 = make_rng(46, 0).standard_normal((1, 2))
        h = 0.3
        tb = dyn.integrate(m, z0, 0.0, h, 1)
        up = np.zeros_like(tb.paths)
        u = np.array([[1.0, -2.0]])
        up[:, 1] = u
        grads, _ = dyn.backprop_integrate(m, tb, up)
        zt = np.concatenate([z0, np.zeros((1, 1))], axis=1)
        direct, _ = mlp_grad(m.drift, zt, h * u)
        for g, want in zip(grads["drift"], direct):
            np.testing.assert_allclose(g, want, atol=1e-12)

    @pytest.mark.parametrize("mode,method,beta", [
        ("ode", "euler", 0.0), ("ode", "euler", 0.6),
        ("ode", "rk4", 0.6), ("sde", "euler", 0.4)])
    def test_full_rollout_matches_fd(self, mode, method, beta):
        m = dyn.make_dynamics_model(2, hidden=(6,), seed=9, momentum_beta=beta,
                                    momentum_gamma=0.8, mode=mode, sigma_init=0.3)
        rng0 = make_rng(47, 0)
        z0 = rng0.standard_normal((4, 2))
        W = rng0.standard_normal((4, 6, 2))
        V = rng0.standard_normal((4, 5, 2))
        _, tb = rollout_loss(m, z0, mode, method, W, V)
        grads, dz0 = dyn.backprop_integrate(m, tb, W, V)

        checked = 0
        heads = [("drift", m.drift)] + ([("diffusion", m.diffusion)] if mode == "sde" else [])
        for name, mlp in heads:
            for pi, p in enumerate(mlp.params()):
                idx = np.unravel_index(checked % p.size, p.shape)
                eps = 1e-6
                orig = p[idx]
                p[idx] = orig + eps
                lp, _ = rollout_loss(m, z0, mode, method, W, V)
                p[idx] = orig - eps
                lm, _ = rollout_loss(m, z0, mode, method, W, V)
                p[idx] = orig
                fd = (lp - lm) / (2 * eps)
                an = grads[name][pi][idx]
                assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-5)
                checked += 1
        # input gradient
        eps = 1e-6
        z0[0, 1] += eps
        lp, _ = rollout_loss(m, z0, mode, method, W, V)
        z0[0, 1] -= 2 * eps
        lm, _ = rollout_loss(m, z0, mode, method, W, V)
        z0[0, 1] += eps
        fd = (lp - lm) / (2 * eps)
        assert abs(fd - dz0[0, 1]) <= 1e-3 * max(abs(fd), 1e-5)

    def test_missing_tape_rejected(self):
        m = dyn.make_dynamics_model(2, hidden=(4,), seed=10)
        tb = dyn.integrate(m, np.zeros((2, 2)), 0.0, 1.0, 2)
        tb.tape = None
        with pytest.raises(ValueError):
            dyn.backprop_integrate(m, tb, np.zeros((2, 3, 2)))
