"""Continuous sampling importance resampling (CSIR) particle filter.

A bootstrap filter for scalar latent states with the continuous systematic
resampling step of the Malik-Pitt variety: the resampled cloud is drawn by
inverting a piecewise-linear CDF through the midpoints of the sorted,
weighted particles. Under a fixed seed the draws do not depend on the
parameter values, so the simulated log-likelihood is continuous in the
parameters and can be handed to the same optimisers as everything else.

Weights are accumulated in log space with max-subtraction; resampling
happens every step.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import FitOptions, FitResult, maximize

__all__ = [
    "WeightCollapse",
    "UnsupportedDimension",
    "CsirResult",
    "csir_filter",
    "csir_loglik",
    "csir_estimate",
    "csir_univariate_adapter",
]


class WeightCollapse(Exception):
    """Every particle weight underflowed to zero at some step."""


class UnsupportedDimension(Exception):
    """CSIR here is univariate; multidimensional states are rejected."""


@dataclass
class CsirResult:
    state_pred_mean: np.ndarray
    state_pred_median: np.ndarray
    state_filt_mean: np.ndarray
    signal_pred_mean: np.ndarray | None
    signal_pred_median: np.ndarray | None
    loglik: float
    ess: np.ndarray = field(repr=False, default=None)


def _continuous_systematic_resample(particles, weights, u0):
    """Sorted piecewise-linear inverse-CDF resampling with systematic
    uniforms (j - 1 + u0)/N."""
    n = particles.size
    order = np.argsort(particles)
    ps = particles[order]
    ws = weights[order]
    cdf_mid = np.cumsum(ws) - 0.5 * ws
    u = (np.arange(n) + u0) / n
    return np.interp(u, cdf_mid, ps)


def csir_filter(obs, dyn, data, n_particles=1000, seed=0, signal_fn=None,
                init=None, rng=None):
    """Run the CSIR filter; returns per-step prediction summaries and the
    simulated log-likelihood.

    ``signal_fn`` (optional) maps a particle array of states to the signal
    scale; its per-step mean and median are recorded alongside the state
    summaries. Missing (NaN) observations skip the weighting and resampling.
    """
    if dyn.state_dim != 1:
        raise UnsupportedDimension("CSIR supports scalar latent states only")
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    rng = np.random.default_rng(seed) if rng is None else rng
    c = float(dyn.c[0]); t_coef = float(dyn.T[0, 0]); q = float(dyn.Q[0, 0])
    sq = math.sqrt(q)
    if init is None:
        mean, info = dyn.stationary_belief()
        m0, sd0 = float(mean[0]), math.sqrt(1.0 / float(info[0, 0]))
    else:
        m0, sd0 = init
    particles = m0 + sd0 * rng.standard_normal(n_particles)

    out = CsirResult(
        state_pred_mean=np.empty(n), state_pred_median=np.empty(n),
        state_filt_mean=np.empty(n),
        signal_pred_mean=np.empty(n) if signal_fn else None,
        signal_pred_median=np.empty(n) if signal_fn else None,
        loglik=0.0, ess=np.empty(n))
    loglik = 0.0
    for t in range(n):
        particles = c + t_coef * particles + sq * rng.standard_normal(n_particles)
        u0 = rng.random()  # drawn every step so the stream is parameter-free
        out.state_pred_mean[t] = particles.mean()
        out.state_pred_median[t] = np.median(particles)
        if signal_fn is not None:
            sig = signal_fn(particles)
            out.signal_pred_mean[t] = sig.mean()
            out.signal_pred_median[t] = np.median(sig)
        y = data[t]
        if np.any(np.isnan(np.atleast_1d(y))):
            out.state_filt_mean[t] = particles.mean()
            out.ess[t] = n_particles
            continue
        logw = np.asarray(obs.logpdf(y, particles), dtype=float)
        top = logw.max()
        if not np.isfinite(top):
            raise WeightCollapse(f"all particle weights vanished at t={t}")
        w = np.exp(logw - top)
        sw = w.sum()
        loglik += top + math.log(sw / n_particles)
        w /= sw
        out.state_filt_mean[t] = float(w @ particles)
        out.ess[t] = 1.0 / float(w @ w)
        particles = _continuous_systematic_resample(particles, w, u0)
    out.loglik = loglik
    return out


def csir_loglik(bundle, psi, data, n_particles=1000, seed=0):
    """Simulated log-likelihood, deterministic given the seed (common random
    numbers across parameter values)."""
    obs, dyn = bundle.build(psi)
    return csir_filter(obs, dyn, data, n_particles, seed=seed).loglik


def csir_estimate(bundle, data, init=None, options=None, n_particles=1000,
                  seed=0) -> FitResult:
    """Maximise the CSIR log-likelihood with the shared derivative-free
    optimiser; the seed is held fixed across objective evaluations."""
    transform = bundle.transform()
    if init is None:
        init = bundle.init_guess(data)
    init_vec = transform.pack(init) if isinstance(init, dict) else np.asarray(init, dtype=float)

    def obj_fn(natural):
        return csir_loglik(bundle, transform.unpack(natural), data,
                           n_particles, seed)

    return maximize(obj_fn, transform, init_vec, options or FitOptions(compute_se=False))


def csir_univariate_adapter(params, data, n_particles=1000, seed=0):
    """CSIR for the leverage volatility model with a scalar particle state.

    Each particle carries (h_t, parent h_{t-1}): the volatility-shock
    residual and the lag-one leverage term use the particle's own parent,
    while deeper lags (j >= 2) are plug-ins held at previously filtered
    means. Returns (h_pred_median (n,), h_filt_mean (n,), loglik). The first
    k+1 steps carry the stationary prediction (no update is possible before
    the lag window fills).
    """
    from .svleverage import SvLeverageParams

    if not isinstance(params, SvLeverageParams):
        params = SvLeverageParams(**params)
    y = np.asarray(data, dtype=float)
    n = y.size
    rho = params.padded_rho()
    k = rho.size - 1
    mu = params.mu
    # with no loadings past lag zero the density never reads the lags and
    # the filter degenerates to the plain bootstrap
    needs_lags = params.rho[0] != 0.0 or params.k >= 1
    warmup = k if needs_lags else -1
    rng = np.random.default_rng(seed)
    m_st = params.c / (1.0 - params.phi)
    sd_st = math.sqrt(params.sigma_eta ** 2 / (1.0 - params.phi ** 2))
    d1 = 1.0 - float(rho[1:] @ rho[1:])
    sig_h = params.sigma_eta * math.sqrt(d1)
    sig_y_fac = math.sqrt(1.0 - rho[0] ** 2 / d1)

    particles = m_st + sd_st * rng.standard_normal(n_particles)
    h_filt = np.full(n, m_st)
    h_pred = np.full(n, m_st)
    loglik = 0.0
    for t in range(n):
        if t <= warmup:
            # lag window not yet available: propagate the plain AR chain
            particles = (params.c + params.phi * particles
                         + params.sigma_eta * rng.standard_normal(n_particles))
            h_filt[t] = m_st
            continue
        parent = particles
        if k and t >= k + 1:
            lag_h = h_filt[t - 1:t - k - 1:-1]
            lag_y = y[t - 1:t - k - 1:-1]
        else:  # warm start; only multiplied by zero loadings when t <= k
            lag_h = np.full(k, m_st)
            lag_y = np.full(k, mu)
        # leverage sum: lag one from the particle's own parent, the rest
        # from the filtered plug-ins
        lev = rho[1] * (lag_y[0] - mu) * np.exp(-parent / 2.0) if k else 0.0
        for j in range(2, k + 1):
            lev = lev + rho[j] * (lag_y[j - 1] - mu) * math.exp(-lag_h[j - 1] / 2.0)
        particles = (params.c + params.phi * parent + params.sigma_eta * lev
                     + sig_h * rng.standard_normal(n_particles))
        u0 = rng.random()
        h_pred[t] = np.median(particles)
        eh2 = np.exp(particles / 2.0)
        mu_y = mu + rho[0] * eh2 / d1 * (
            (particles - params.c - params.phi * parent) / params.sigma_eta - lev)
        sig_y = eh2 * sig_y_fac
        logw = (-0.5 * math.log(2.0 * math.pi) - np.log(sig_y)
                - (y[t] - mu_y) ** 2 / (2.0 * sig_y ** 2))
        top = logw.max()
        if not np.isfinite(top):
            raise WeightCollapse(f"all particle weights vanished at t={t}")
        w = np.exp(logw - top)
        sw = w.sum()
        loglik += top + math.log(sw / n_particles)
        w /= sw
        h_filt[t] = float(w @ particles)
        particles = _continuous_systematic_resample(particles, w, u0)
    return h_pred, h_filt, loglik
