import math

import numpy as np
import pytest

from bellmanfilter.dynamics import (DegeneracyMask, LinearGaussianDynamics,
                                    SingularQ, lg_transition_logpdf,
                                    predict_state, transition_derivatives)
from bellmanfilter.numerics import fd_gradient, fd_hessian, predict_info_lg


def scalar_dyn(c=0.0, t=0.98, q=0.0225):
    return LinearGaussianDynamics([c], [[t]], [[q]])


class TestTransitionLogpdf:
    def test_zero_residual(self):
        dyn = scalar_dyn()
        val = lg_transition_logpdf(dyn, [0.98], [1.0])
        np.testing.assert_allclose(val, -0.5 * math.log(2 * math.pi * 0.0225))

    def test_unit_residual_in_noise_units(self):
        dyn = scalar_dyn()
        val = lg_transition_logpdf(dyn, [0.98 + 0.15], [1.0])
        np.testing.assert_allclose(val, -0.5 * math.log(2 * math.pi * 0.0225) - 0.5)

    def test_singular_q(self):
        dyn = LinearGaussianDynamics([0.0], [[0.9]], [[0.0]])
        with pytest.raises(SingularQ):
            lg_transition_logpdf(dyn, [0.0], [0.0])


class TestDerivativeBlocks:
    def test_scalar_closed_form(self):
        dyn = scalar_dyn()
        d = transition_derivatives(dyn, [0.5], [0.4])
        np.testing.assert_allclose(d.J11, [[44.444444]], rtol=1e-6)
        np.testing.assert_allclose(d.J22, [[42.684444]], rtol=1e-6)
        np.testing.assert_allclose(d.J12, -d.J11 * 0.98)
        np.testing.assert_allclose(d.J21, d.J12.T)

    def test_decoupled_states(self):
        dyn = LinearGaussianDynamics([0.0, 0.0], np.zeros((2, 2)), np.eye(2))
        d = transition_derivatives(dyn, [0.3, -0.2], [1.0, 2.0])
        np.testing.assert_allclose(d.J12, 0.0)

    def test_blocks_constant_in_states(self, rng):
        dyn = LinearGaussianDynamics(rng.normal(size=2) * 0.1,
                                     rng.normal(size=(2, 2)) * 0.3,
                                     np.eye(2) * 0.5)
        d1 = transition_derivatives(dyn, rng.normal(size=2), rng.normal(size=2))
        d2 = transition_derivatives(dyn, rng.normal(size=2), rng.normal(size=2))
        for name in ("J11", "J12", "J21", "J22"):
            np.testing.assert_array_equal(getattr(d1, name), getattr(d2, name))

    def test_against_finite_differences(self, rng):
        """All six blocks, including the cross-block sign, against the
        stacked finite-difference Hessian of the log-density."""
        dyn = LinearGaussianDynamics([0.1, -0.2],
                                     [[0.7, 0.1], [-0.2, 0.5]],
                                     [[0.4, 0.1], [0.1, 0.3]])
        a_t = rng.normal(size=2)
        a_prev = rng.normal(size=2)
        d = transition_derivatives(dyn, a_t, a_prev)

        def stacked(z):
            return lg_transition_logpdf(dyn, z[:2], z[2:])

        z0 = np.concatenate([a_t, a_prev])
        grad = fd_gradient(stacked, z0)
        hess = fd_hessian(stacked, z0)
        np.testing.assert_allclose(d.J1, grad[:2], rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(d.J2, grad[2:], rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(d.J11, -hess[:2, :2], rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(d.J12, -hess[:2, 2:], rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(d.J21, -hess[2:, :2], rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(d.J22, -hess[2:, 2:], rtol=1e-4, atol=1e-5)

    def test_predict_info_equals_block_formula(self, rng):
        """Table-style prediction: predict_info_lg equals
        J11 - J12 (I_prev + J22)^-1 J21."""
        for _ in range(20):
            t_mat = rng.normal(size=(2, 2)) * 0.4
            q = rng.normal(size=(2, 2))
            q = q @ q.T + 0.2 * np.eye(2)
            info = rng.normal(size=(2, 2))
            info = info @ info.T + 0.3 * np.eye(2)
            dyn = LinearGaussianDynamics(np.zeros(2), t_mat, q)
            d = transition_derivatives(dyn, np.zeros(2), np.zeros(2))
            via_blocks = d.J11 - d.J12 @ np.linalg.solve(info + d.J22, d.J21)
            np.testing.assert_allclose(predict_info_lg(t_mat, q, info), via_blocks,
                                       rtol=0, atol=1e-10)


class TestPredictState:
    def test_stationary_fixed_point(self):
        dyn = scalar_dyn(c=0.02)
        mean, _ = dyn.stationary_belief()
        np.testing.assert_allclose(predict_state(dyn, mean), mean)

    def test_scalar(self):
        np.testing.assert_allclose(predict_state(scalar_dyn(), [1.0]), [0.98])

    def test_leverage_transition_without_lag_loadings(self):
        from bellmanfilter.svleverage import SvLeverageParams, SvTransition
        p = SvLeverageParams(mu=0.0, c=-0.2, phi=0.9, sigma_eta=0.3,
                             rho=[-0.5, 0.0, 0.0])
        trans = SvTransition(p, y_lags=[0.4, -0.3])
        a_prev = np.array([-9.5, -10.5, -11.0])
        out = predict_state(trans, a_prev)
        np.testing.assert_allclose(out, [-0.2 + 0.9 * -9.5, -9.5, -10.5])


class TestDegeneracyMask:
    def test_partition(self):
        mask = DegeneracyMask(3, ((1, 0), (2, 1)))
        assert mask.free_current == (0,)
        sel = mask.selection()
        x = np.array([1.0, 2.0, 3.0, 4.0])  # (h_t, prev0, prev1, prev2)
        full = sel @ x
        np.testing.assert_array_equal(full[:3], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(full[3:], [2.0, 3.0, 4.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            DegeneracyMask(2, ((0, 0), (0, 1)))
        with pytest.raises(ValueError):
            DegeneracyMask(2, ((5, 0),))
