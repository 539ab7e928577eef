import math

import numpy as np
import pytest
from scipy.integrate import quad

from bellmanfilter.dynamics import LinearGaussianDynamics
from bellmanfilter.kalman import (ZeroObservation, kalman_filter,
                                  kalman_filter_cov, kalman_loglik,
                                  kalman_step, qmle_transforms)
from bellmanfilter.obsmodels import LinearGaussianObservation


def random_lg_model(rng, m=None, l=None):
    m = m or int(rng.integers(1, 4))
    l = l or int(rng.integers(1, 3))
    t_mat = rng.normal(size=(m, m))
    t_mat *= rng.uniform(0.3, 0.95) / max(1e-9, np.abs(np.linalg.eigvals(t_mat)).max())
    q = rng.normal(size=(m, m))
    q = q @ q.T + 0.1 * np.eye(m)
    c = rng.normal(size=m) * 0.2
    z = rng.normal(size=(l, m))
    h = rng.normal(size=(l, l))
    h = h @ h.T + 0.2 * np.eye(l)
    d = rng.normal(size=l)
    return (LinearGaussianObservation(d, z, h),
            LinearGaussianDynamics(c, t_mat, q))


def simulate_lg(obs, dyn, n, rng):
    alpha = np.zeros((n, dyn.state_dim))
    alpha[0] = dyn.stationary_belief()[0]
    for t in range(1, n):
        alpha[t] = dyn.sample_next(alpha[t - 1], rng)
    y = obs.sample(alpha, rng)
    return (y if obs.obs_dim > 1 else np.asarray(y).reshape(-1)), alpha


class TestKalmanStep:
    def test_scalar_arithmetic(self):
        obs = LinearGaussianObservation([0.0], [[1.0]], [[1.0]])
        dyn = LinearGaussianDynamics([0.0], [[1.0]], [[0.0]])
        # prediction passes (a=0, I=1) through unit noiseless dynamics
        step = kalman_step(obs, dyn, [0.0], [[1.0]], 2.0)
        np.testing.assert_allclose(step.a_upd, [1.0])
        np.testing.assert_allclose(step.I_upd, [[2.0]])

    def test_missing_keeps_belief(self, rng):
        obs, dyn = random_lg_model(rng, m=2, l=1)
        step = kalman_step(obs, dyn, [0.1, -0.2], np.eye(2), float("nan"))
        np.testing.assert_array_equal(step.a_upd, step.a_pred)
        np.testing.assert_array_equal(step.I_upd, step.I_pred)
        assert step.loglik == 0.0

    def test_information_vs_covariance_form(self, rng):
        obs, dyn = random_lg_model(rng)
        y, _ = simulate_lg(obs, dyn, 50, rng)
        info = kalman_filter(obs, dyn, y)
        cov = kalman_filter_cov(obs, dyn, y)
        np.testing.assert_allclose(info["a_upd"], cov["a_upd"], rtol=0, atol=1e-10)
        for t in range(50):
            np.testing.assert_allclose(np.linalg.inv(info["I_upd"][t]),
                                       cov["P_upd"][t], rtol=0, atol=1e-10)
        np.testing.assert_allclose(info["loglik"], cov["loglik"], rtol=0, atol=1e-10)


class TestQmleTransforms:
    def test_unit_observation(self):
        tr = qmle_transforms("sv-gauss", np.array([1.0]))
        np.testing.assert_allclose(tr.data, [0.0])

    def test_log_chi2_moments_against_quadrature(self):
        # E[log chi2_1] and Var[log chi2_1] by numerical integration
        pdf = lambda x: math.exp(-x / 2) / math.sqrt(2 * math.pi * x)
        mean, _ = quad(lambda x: math.log(x) * pdf(x), 0, np.inf)
        var, _ = quad(lambda x: (math.log(x) - mean) ** 2 * pdf(x), 0, np.inf)
        tr = qmle_transforms("sv-gauss", np.array([1.0]))
        np.testing.assert_allclose(tr.obs.d[0], mean, rtol=1e-8)
        np.testing.assert_allclose(tr.obs.d[0], -1.270363, rtol=1e-6)
        np.testing.assert_allclose(tr.obs.H[0, 0], var, rtol=1e-8)

    def test_zero_censoring(self):
        tr = qmle_transforms("sv-gauss", np.array([0.0, 1.0]))
        assert tr.n_censored == 1
        np.testing.assert_allclose(tr.data[0], math.log(1e-16))

    def test_sv_t_offsets_match_simulation(self):
        rng = np.random.default_rng(4)
        nu = 10.0
        y = math.sqrt((nu - 2) / nu) * rng.standard_t(nu, 400_000)
        x = np.log(y ** 2)
        tr = qmle_transforms("sv-t", y, nu=nu)
        assert abs(tr.obs.d[0] - x.mean()) < 4 * x.std() / math.sqrt(x.size)
        assert abs(tr.obs.H[0, 0] - x.var()) < 0.05

    def test_local_level_passthrough(self):
        y = np.array([1.0, -2.0])
        tr = qmle_transforms("local-level-t", y, sigma=0.45)
        np.testing.assert_array_equal(tr.data, y)
        np.testing.assert_allclose(tr.obs.H[0, 0], 0.45 ** 2)


class TestExactEquivalences:
    def test_bellman_matches_kalman_and_loglik(self, rng):
        from bellmanfilter.bellman import filter_lg_arrays
        for _ in range(10):
            obs, dyn = random_lg_model(rng, l=1)
            y, _ = simulate_lg(obs, dyn, 80, rng)
            kf = kalman_filter(obs, dyn, y)
            run = filter_lg_arrays(obs, dyn, y)
            m = dyn.state_dim
            a_upd = run["a_upd"] if m > 1 else run["a_upd"].reshape(-1, 1)
            np.testing.assert_allclose(a_upd, kf["a_upd"], rtol=0, atol=1e-10)
            np.testing.assert_allclose(run["objective"], kf["loglik"].sum(),
                                       rtol=0, atol=1e-8)
