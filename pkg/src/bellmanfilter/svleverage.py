"""Stochastic volatility with generalized leverage.

Model: returns y_t = mu + exp(h_t/2) eps_t with log-volatility
h_t = c + phi h_{t-1} + sigma_eta eta_t, where the volatility shock loads
on current and lagged return shocks, eta_t = sum_j rho_j eps_{t-j} +
sigma_xi xi_t and sigma_xi^2 = 1 - sum_j rho_j^2 keeps Var(eta) = 1.

Conditioning on the lagged shocks turns this into a state-space model for
the stacked log-volatilities: the observation density is Gaussian with
mean mu_y and deviation sig_y depending on (h_t, ..., h_{t-k}), and the
transition of h_t given the previous stack is Gaussian with mean mu_h and
deviation sig_h; the lag coordinates shift deterministically and are
handled as pinned coordinates, never as densities.

With contemporaneous leverage only (k = 0) the observation density still
reads h_{t-1} through the volatility shock, so internally the lag order is
padded to k >= 1 with a zero loading; the padded formulas are identical.

The filter itself is the joint Newton iteration over
x = (h_t, ..., h_{t-k-1}) with the updated information taken as the Schur
complement of the bottom-right (oldest-lag) entry of the joint negative
Hessian at the peak.  A compiled kernel (same formulas, _svkernel.py) runs
the estimation-time loops; the plain-python route through the generic
two-state machinery is kept for cross-checking.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _svkernel
from .bellman import StateBelief, UpdateOptions, step_general
from .dynamics import DegeneracyMask, TransitionDerivatives
from .estimation import (FitOptions, FitResult, NonFiniteObjective, Transform,
                         maximize)
from .obsmodels import ObsEval, ObservationModel

__all__ = [
    "InvalidParams",
    "LagWindowMissing",
    "SvLeverageParams",
    "sv_simulate",
    "sv_obs_eval",
    "sv_trans_eval",
    "SvTransition",
    "SvObsSlice",
    "sv_filter",
    "sv_objective",
    "sv_fit",
    "SvFitResult",
]


class InvalidParams(Exception):
    """Parameter invariants violated (|phi| < 1, sigma_eta > 0, sum rho^2 < 1)."""


class LagWindowMissing(Exception):
    """Evaluation requested before the lag window has filled (t <= k+1)."""


class FgEval(NamedTuple):
    value: float
    grad: np.ndarray
    hess: np.ndarray


@dataclass
class SvLeverageParams:
    mu: float
    c: float
    phi: float
    sigma_eta: float
    rho: np.ndarray

    def __post_init__(self):
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if not abs(self.phi) < 1:
            raise InvalidParams(f"|phi| must be < 1, got {self.phi}")
        if not self.sigma_eta > 0:
            raise InvalidParams(f"sigma_eta must be > 0, got {self.sigma_eta}")
        if float(self.rho @ self.rho) >= 1.0:
            raise InvalidParams("sum of squared leverage loadings must be < 1")

    @property
    def k(self):
        return self.rho.size - 1

    @property
    def sigma_xi(self):
        return math.sqrt(1.0 - float(self.rho @ self.rho))

    def padded_rho(self):
        """Loadings with the lag order padded to at least one lag (the
        observation density reads h_{t-1} whenever rho_0 != 0)."""
        if self.k >= 1:
            return self.rho
        return np.array([self.rho[0], 0.0])

    def stationary_mean(self):
        return self.c / (1.0 - self.phi)

    def stationary_var(self):
        return self.sigma_eta ** 2 / (1.0 - self.phi ** 2)

    def as_dict(self):
        return {"mu": self.mu, "c": self.c, "phi": self.phi,
                "sigma_eta": self.sigma_eta, "rho": self.rho.tolist()}


def sv_simulate(params, n, seed=None, rng=None, burn=300):
    """Simulate (y, h) of length n after a burn-in from the stationary
    AR(1) start; the volatility shock is built directly from current and
    lagged return shocks."""
    p = params if isinstance(params, SvLeverageParams) else SvLeverageParams(**params)
    rng = np.random.default_rng(seed) if rng is None else rng
    k = p.k
    total = n + burn
    eps = rng.standard_normal(total)
    xi = rng.standard_normal(total)
    h = np.empty(total)
    y = np.empty(total)
    h[0] = p.stationary_mean() + math.sqrt(p.stationary_var()) * rng.standard_normal()
    y[0] = p.mu + math.exp(h[0] / 2.0) * eps[0]
    sig_xi = p.sigma_xi
    for t in range(1, total):
        eta = sig_xi * xi[t]
        for j in range(min(k, t) + 1):
            eta += p.rho[j] * eps[t - j]
        h[t] = p.c + p.phi * h[t - 1] + p.sigma_eta * eta
        y[t] = p.mu + math.exp(h[t] / 2.0) * eps[t]
    return y[burn:], h[burn:]


def _padded(params):
    p = params if isinstance(params, SvLeverageParams) else SvLeverageParams(**params)
    return p, p.padded_rho()


def sv_obs_eval(params, a_t, y_t, y_lags, expected=False) -> FgEval:
    """Observation log-density f and its gradient/Hessian with respect to
    the current stack a_t = (h_t, ..., h_{t-k}); ``expected=True`` takes the
    conditional expectation of the Hessian given the state (two terms drop)."""
    p, rho = _padded(params)
    a_t = np.atleast_1d(np.asarray(a_t, dtype=float))
    y_lags = np.atleast_1d(np.asarray(y_lags, dtype=float))
    k = rho.size - 1
    if a_t.size != k + 1 or y_lags.size < k:
        raise LagWindowMissing(
            f"need state dim {k + 1} and {k} lagged observations")
    val, grad, hess = _svkernel._f_eval.py_func(
        p.mu, p.c, p.phi, p.sigma_eta, rho, a_t, float(y_t), y_lags[:k], expected)
    return FgEval(val, grad, hess)


def sv_trans_eval(params, a_t, y_lags) -> FgEval:
    """Transition log-density g of h_t (the non-degenerate coordinate) and
    derivatives with respect to a_t; the deterministic lag shifts are pinned
    coordinates and carry no density."""
    p, rho = _padded(params)
    a_t = np.atleast_1d(np.asarray(a_t, dtype=float))
    y_lags = np.atleast_1d(np.asarray(y_lags, dtype=float))
    k = rho.size - 1
    if a_t.size != k + 1 or y_lags.size < k:
        raise LagWindowMissing(
            f"need state dim {k + 1} and {k} lagged observations")
    val, grad, hess = _svkernel._g_eval.py_func(
        p.mu, p.c, p.phi, p.sigma_eta, rho, a_t, y_lags[:k])
    return FgEval(val, grad, hess)


class SvObsSlice(ObservationModel):
    """Observation evaluator for one time step (the lagged data are baked
    in), presenting the generic two-state machinery's interface."""

    id = "sv-leverage-obs"
    realised_nonneg = True  # resolves to Newton search with Fisher fallback

    def __init__(self, params, y_lags):
        self.params, self._rho = _padded(params)
        self.y_lags = np.atleast_1d(np.asarray(y_lags, dtype=float))
        self.state_dim = self._rho.size

    def eval(self, y, a) -> ObsEval:
        f = sv_obs_eval(self.params, a, y, self.y_lags)
        fe = sv_obs_eval(self.params, a, y, self.y_lags, expected=True)
        return ObsEval(f.value, f.grad, -f.hess, -fe.hess)

    def logpdf(self, y, a):
        return sv_obs_eval(self.params, a, y, self.y_lags).value


class SvTransition:
    """Transition model over the stacked state (h_t, ..., h_{t-k}) for one
    time step: a Gaussian density for h_t plus pinned lag shifts."""

    def __init__(self, params, y_lags):
        self.params, self._rho = _padded(params)
        self.y_lags = np.atleast_1d(np.asarray(y_lags, dtype=float))
        k = self._rho.size - 1
        self.state_dim = k + 1
        self.mask = DegeneracyMask(self.state_dim,
                                   tuple((j, j - 1) for j in range(1, k + 1)))

    def predict(self, a_prev):
        p, rho = self.params, self._rho
        k = rho.size - 1
        a_prev = np.atleast_1d(np.asarray(a_prev, dtype=float))
        lev = 0.0
        for j in range(1, k + 1):
            lev += rho[j] * (self.y_lags[j - 1] - p.mu) * math.exp(-a_prev[j - 1] / 2.0)
        out = np.empty(k + 1)
        out[0] = p.c + p.phi * a_prev[0] + p.sigma_eta * lev
        out[1:] = a_prev[:k]
        return out

    def logpdf(self, a_t, a_prev):
        # h_{t-1..t-k} are read from a_t; under the mask they coincide with
        # the leading coordinates of a_prev.
        return sv_trans_eval(self.params, a_t, self.y_lags).value

    def derivatives(self, a_t, a_prev) -> TransitionDerivatives:
        ev = sv_trans_eval(self.params, a_t, self.y_lags)
        m = self.state_dim
        zero_v = np.zeros(m)
        zero_m = np.zeros((m, m))
        return TransitionDerivatives(J1=ev.grad, J2=zero_v, J11=-ev.hess,
                                     J12=zero_m, J21=zero_m, J22=zero_m)

    def stationary_belief(self):
        p = self.params
        m = self.state_dim
        cov = p.stationary_var() * p.phi ** np.abs(
            np.arange(m).reshape(-1, 1) - np.arange(m))
        return np.full(m, p.stationary_mean()), np.linalg.inv(cov)


def sv_filter(params, data, opts=None, engine="kernel"):
    """Filter a return series; beliefs live on (h_t, ..., h_{t-k}).

    The first k+1 steps have no lag window: beliefs are seeded from the
    stationary AR(1) chain and the trace is NaN-padded there. Returns a
    dict with h_pred, h_upd, a_upd, decomposition, iterations, converged,
    skipped, objective, warmup.
    """
    p, rho = _padded(params)
    opts = opts or UpdateOptions()
    y = np.asarray(data, dtype=float)
    if np.any(~np.isfinite(y)):
        raise ValueError("leverage filter does not accept missing data")
    k = rho.size - 1
    if y.size <= k + 1:
        raise LagWindowMissing(f"need more than {k + 1} observations")
    if engine == "kernel":
        h_pred, h_upd, a_upd, dec, iters, conv, skip, ok = _svkernel.sv_filter_kernel(
            p.mu, p.c, p.phi, p.sigma_eta, rho, y, opts.tol, opts.max_iter,
            opts.damping)
        if not ok:
            raise NonFiniteObjective("leverage filter diverged at these parameters")
    elif engine == "python":
        h_pred, h_upd, a_upd, dec, iters, conv, skip = _sv_filter_python(
            p, rho, y, opts)
    else:
        raise ValueError("engine must be 'kernel' or 'python'")
    warmup = k + 1
    return {"h_pred": h_pred, "h_upd": h_upd, "a_upd": a_upd,
            "decomposition": dec, "iterations": iters, "converged": conv,
            "skipped": skip, "objective": float(dec[warmup:].sum()),
            "warmup": warmup}


def _sv_filter_python(p, rho, y, opts):
    """Reference path through the generic joint-Newton step."""
    k = rho.size - 1
    dim = k + 1
    n = y.size
    h_pred = np.full(n, np.nan)
    h_upd = np.full(n, np.nan)
    a_upd = np.full((n, dim), np.nan)
    dec = np.zeros(n)
    iters = np.zeros(n, dtype=np.int64)
    conv = np.zeros(n, dtype=bool)
    skip = np.zeros(n, dtype=bool)
    trans0 = SvTransition(p, np.zeros(k))
    mean, info = trans0.stationary_belief()
    belief = StateBelief(mean, info)
    for t in range(k + 1, n):
        y_lags = y[t - 1:t - k - 1:-1] if k else np.empty(0)
        trans = SvTransition(p, y_lags)
        obs = SvObsSlice(p, y_lags)
        out = step_general(obs, trans, belief, y[t], opts)
        h_pred[t] = out.predicted.mean[0]
        h_upd[t] = out.updated.mean[0]
        a_upd[t] = out.updated.mean
        dec[t] = out.decomposition.contribution
        iters[t] = out.iterations
        conv[t] = out.converged
        skip[t] = out.skipped
        belief = out.updated
    return h_pred, h_upd, a_upd, dec, iters, conv, skip


def sv_objective(params, data, opts=None):
    """Decomposition objective of the leverage filter (kernel path)."""
    res = sv_filter(params, data, opts=opts, engine="kernel")
    if not np.isfinite(res["objective"]):
        raise NonFiniteObjective("leverage objective is not finite")
    return res["objective"]


def sv_transform(k) -> Transform:
    return Transform([
        ("mu", "identity"),
        ("c", "identity"),
        ("phi", "atanh"),
        ("sigma_eta", "log"),
        ("rho", "ball", {"size": k + 1}),
    ])


def sv_init_guess(data, k):
    """Neutral starting point from moments of log squared demeaned returns."""
    y = np.asarray(data, dtype=float)
    mu0 = float(np.median(y))
    lx = np.log(np.maximum((y - mu0) ** 2, 1e-12))
    level = float(np.mean(lx)) + 1.27
    phi0 = 0.95
    return {"mu": mu0, "c": (1.0 - phi0) * level, "phi": phi0,
            "sigma_eta": 0.3, "rho": np.zeros(k + 1)}


@dataclass
class SvFitResult:
    fit: FitResult
    bic: float
    k: int

    @property
    def params(self):
        return self.fit.params

    @property
    def se(self):
        return self.fit.se


def _psi_to_params(psi):
    return SvLeverageParams(mu=psi["mu"], c=psi["c"], phi=psi["phi"],
                            sigma_eta=psi["sigma_eta"], rho=psi["rho"])


def sv_fit(data, k, init=None, options=None, filter_opts=None) -> SvFitResult:
    """Estimate the leverage model with k lags; BIC uses the number of
    effective (post-warm-up) terms in the objective."""
    y = np.asarray(data, dtype=float)
    transform = sv_transform(k)
    init = init if init is not None else sv_init_guess(y, k)
    init_vec = transform.pack(init) if isinstance(init, dict) else np.asarray(init, dtype=float)
    fopts = filter_opts or UpdateOptions()

    def obj_fn(natural):
        psi = transform.unpack(natural)
        try:
            params = _psi_to_params(psi)
        except InvalidParams as exc:
            raise NonFiniteObjective(str(exc)) from exc
        return sv_objective(params, y, fopts)

    res = maximize(obj_fn, transform, init_vec, options)
    k_eff = max(k, 1)
    n_used = y.size - (k_eff + 1)
    p_count = transform.dim
    bic = -2.0 * res.objective + p_count * math.log(n_used)
    return SvFitResult(fit=res, bic=bic, k=k)
