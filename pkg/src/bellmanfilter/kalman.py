"""Exact Kalman filter for linear-Gaussian models, information and covariance
forms, plus the quasi-likelihood transforms used as a baseline for the
volatility and local-level families.

Missing observations are encoded as NaN; the update collapses to the
prediction and contributes nothing to the log-likelihood.
"""

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import LinearGaussianDynamics
from .obsmodels import LinearGaussianObservation
from .numerics import predict_info_lg

__all__ = [
    "SingularInformation",
    "ZeroObservation",
    "KalmanStep",
    "LinearGaussianObservation",
    "kalman_step",
    "kalman_filter",
    "kalman_filter_cov",
    "kalman_loglik",
    "qmle_transforms",
    "QmleTransform",
]

LOG2PI = math.log(2.0 * math.pi)


class SingularInformation(Exception):
    """Belief information matrix cannot be inverted."""


class ZeroObservation(Exception):
    """log(y^2) transform hit y == 0 and censoring is disabled."""


@dataclass
class KalmanStep:
    a_pred: np.ndarray
    I_pred: np.ndarray
    a_upd: np.ndarray
    I_upd: np.ndarray
    loglik: float


def kalman_step(obs: LinearGaussianObservation, dyn: LinearGaussianDynamics,
                mean, info, y) -> KalmanStep:
    """One predict/update cycle in information form.

    ``mean``/``info`` parametrize the previous filtered belief. The
    log-likelihood contribution is the Gaussian prediction-error density;
    a NaN observation leaves the belief unchanged and contributes zero.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    info = np.atleast_2d(np.asarray(info, dtype=float))
    a_pred = dyn.predict(mean)
    I_pred = predict_info_lg(dyn.T, dyn.Q, info)
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(np.isnan(y_arr)):
        return KalmanStep(a_pred, I_pred, a_pred.copy(), I_pred.copy(), 0.0)
    v = y_arr - obs.d - obs.Z @ a_pred
    I_upd = I_pred + obs.Z.T @ np.linalg.solve(obs.H, obs.Z)
    try:
        a_upd = a_pred + np.linalg.solve(I_upd, obs.Z.T @ np.linalg.solve(obs.H, v))
    except np.linalg.LinAlgError as exc:
        raise SingularInformation(str(exc)) from exc
    p_pred = np.linalg.inv(I_pred)
    f_mat = obs.Z @ p_pred @ obs.Z.T + obs.H
    sign, logdet_f = np.linalg.slogdet(f_mat)
    if sign <= 0:
        raise SingularInformation("prediction-error covariance not positive definite")
    ll = -0.5 * (v.size * LOG2PI + logdet_f + float(v @ np.linalg.solve(f_mat, v)))
    return KalmanStep(a_pred, I_pred, a_upd, 0.5 * (I_upd + I_upd.T), ll)


def _init_belief(dyn, init):
    if init is None or init == "unconditional":
        return dyn.stationary_belief()
    mean, info = init
    return (np.atleast_1d(np.asarray(mean, dtype=float)),
            np.atleast_2d(np.asarray(info, dtype=float)))


def kalman_filter(obs, dyn, data, init=None):
    """Run the information-form filter over a series.

    Returns dict of stacked arrays: a_pred, I_pred, a_upd, I_upd, loglik
    (per-step contributions).
    """
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    mean, info = _init_belief(dyn, init)
    m = dyn.state_dim
    out = {
        "a_pred": np.empty((n, m)), "I_pred": np.empty((n, m, m)),
        "a_upd": np.empty((n, m)), "I_upd": np.empty((n, m, m)),
        "loglik": np.empty(n),
    }
    for t in range(n):
        step = kalman_step(obs, dyn, mean, info, data[t])
        out["a_pred"][t] = step.a_pred
        out["I_pred"][t] = step.I_pred
        out["a_upd"][t] = step.a_upd
        out["I_upd"][t] = step.I_upd
        out["loglik"][t] = step.loglik
        mean, info = step.a_upd, step.I_upd
    return out


def kalman_filter_cov(obs, dyn, data, init=None):
    """Covariance-form twin of kalman_filter (P-recursions); same outputs
    with P_pred/P_upd in place of information matrices."""
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    mean, info = _init_belief(dyn, init)
    p = np.linalg.inv(info)
    a = mean.copy()
    m = dyn.state_dim
    out = {
        "a_pred": np.empty((n, m)), "P_pred": np.empty((n, m, m)),
        "a_upd": np.empty((n, m)), "P_upd": np.empty((n, m, m)),
        "loglik": np.empty(n),
    }
    for t in range(n):
        a_pred = dyn.predict(a)
        p_pred = dyn.T @ p @ dyn.T.T + dyn.Q
        y = np.atleast_1d(data[t])
        if np.any(np.isnan(y)):
            a, p, ll = a_pred, p_pred, 0.0
        else:
            v = y - obs.d - obs.Z @ a_pred
            f_mat = obs.Z @ p_pred @ obs.Z.T + obs.H
            k_gain = p_pred @ obs.Z.T @ np.linalg.inv(f_mat)
            a = a_pred + k_gain @ v
            p = p_pred - k_gain @ obs.Z @ p_pred
            p = 0.5 * (p + p.T)
            sign, logdet_f = np.linalg.slogdet(f_mat)
            ll = -0.5 * (v.size * LOG2PI + logdet_f + float(v @ np.linalg.solve(f_mat, v)))
        out["a_pred"][t] = a_pred
        out["P_pred"][t] = p_pred
        out["a_upd"][t] = a
        out["P_upd"][t] = p
        out["loglik"][t] = ll
    return out


def kalman_loglik(obs, dyn, data, init=None):
    if dyn.state_dim == 1 and obs.obs_dim == 1 and init is None:
        return _kalman_loglik_scalar(obs, dyn, np.asarray(data, dtype=float))
    return float(kalman_filter(obs, dyn, data, init=init)["loglik"].sum())


def _kalman_loglik_scalar(obs, dyn, data):
    """Covariance-form scalar recursion on plain floats (estimation hot path;
    agrees with the matrix routes to rounding)."""
    c = float(dyn.c[0]); t_coef = float(dyn.T[0, 0]); q = float(dyn.Q[0, 0])
    d = float(obs.d[0]); z = float(obs.Z[0, 0]); h = float(obs.H[0, 0])
    mean, info = dyn.stationary_belief()
    a = float(mean[0])
    p = 1.0 / float(info[0, 0])
    ll = 0.0
    for y in data:
        a_pred = c + t_coef * a
        p_pred = t_coef * t_coef * p + q
        if math.isnan(y):
            a, p = a_pred, p_pred
            continue
        f_var = z * z * p_pred + h
        v = y - d - z * a_pred
        k_gain = p_pred * z / f_var
        a = a_pred + k_gain * v
        p = p_pred - k_gain * z * p_pred
        ll += -0.5 * (LOG2PI + math.log(f_var) + v * v / f_var)
    return ll


@dataclass
class QmleTransform:
    """Transformed series plus the linear observation equation to filter it with."""

    data: np.ndarray
    obs: LinearGaussianObservation
    n_censored: int = 0


# E[log chi2_1] = digamma(1/2) + log 2 and Var[log chi2_1] = pi^2 / 2
_E_LOG_CHI2_1 = -1.2703628454614782
_V_LOG_CHI2_1 = math.pi ** 2 / 2.0


def qmle_transforms(family, y, nu=None, sigma=None, floor=1e-8) -> QmleTransform:
    """Linearizing transforms for quasi-maximum-likelihood Kalman filtering.

    Volatility families: x = log(y^2) observes alpha plus log-chi-square
    noise with known mean/variance offsets. Zeros are censored at
    log(floor^2) and counted. The local-level family passes through with a
    Gaussian observation whose variance matches the true noise variance
    sigma^2 (the QMLE fit typically re-estimates it).
    """
    y = np.asarray(y, dtype=float)
    if family == "sv-gauss":
        zero = np.abs(y) < floor
        x = np.log(np.maximum(np.abs(y), floor) ** 2)
        d = _E_LOG_CHI2_1
        h = _V_LOG_CHI2_1
        return QmleTransform(x, LinearGaussianObservation([d], [[1.0]], [[h]]),
                             int(zero.sum()))
    if family == "sv-t":
        if nu is None or nu <= 2:
            raise ValueError("sv-t transform needs nu > 2")
        from scipy.special import digamma, polygamma
        zero = np.abs(y) < floor
        x = np.log(np.maximum(np.abs(y), floor) ** 2)
        # log y^2 = alpha + log((nu-2)/nu) + log t_nu^2;
        # log t_nu^2 = log chi2_1 - log(chi2_nu / nu), independent pieces.
        d = (math.log((nu - 2) / nu) + _E_LOG_CHI2_1
             - (digamma(nu / 2) + math.log(2.0) - math.log(nu)))
        h = _V_LOG_CHI2_1 + polygamma(1, nu / 2)
        return QmleTransform(x, LinearGaussianObservation([d], [[1.0]], [[float(h)]]),
                             int(zero.sum()))
    if family == "local-level-t":
        if sigma is None or sigma <= 0:
            raise ValueError("local-level-t transform needs sigma > 0")
        return QmleTransform(y.copy(),
                             LinearGaussianObservation([0.0], [[1.0]], [[sigma ** 2]]), 0)
    raise ValueError(f"no QMLE transform for family {family!r}")
