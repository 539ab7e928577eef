"""Posterior-mode filtering by dynamic programming with a quadratic
value-function approximation.

Two recursions are provided. ``filter_lg`` handles linear-Gaussian state
dynamics with an arbitrary observation density: the prediction step is
closed-form and the update maximises

    l(y_t | a) - 1/2 (a - a_pred)' I_pred (a - a_pred)

by damped Newton/Fisher/BHHH iteration started at the prediction.
``step_general`` handles general (possibly degenerate) transitions by a
joint Newton iteration over the stacked pair (a_t, a_prev), using analytic
block inversion, with the updated information matrix obtained from the
second-order envelope identity

    I_upd = J11 - J12 (I_prev + J22)^-1 J21 - d2 l(y|a) / da da'.

Inner iterations stop when the max-abs state change drops below ``tol`` or
after ``max_iter`` rounds; a step that would decrease the objective is
halved up to ``damping`` times, then swapped for the Fisher direction, and
failing that the update is skipped (update := prediction, flagged).
"""

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (DegeneracyMask, LinearGaussianDynamics,
                       predict_state, transition_derivatives)
from .numerics import chol_pd, predict_info_lg
from .obsmodels import LinearGaussianObservation, ObservationModel

__all__ = [
    "NotConverged",
    "IndefiniteDirection",
    "InfoNotPD",
    "StateBelief",
    "UpdateOptions",
    "DecompositionTerms",
    "FilterStepOutput",
    "diffuse_belief",
    "update_lg",
    "filter_lg",
    "filter_lg_arrays",
    "step_general",
    "filter_general",
    "info_update_general",
    "stability_jacobian",
]


class NotConverged(Exception):
    """Inner optimisation hit the iteration cap (reported, rarely raised)."""


class IndefiniteDirection(Exception):
    """Newton matrix is not positive definite and fallback is disabled."""


class InfoNotPD(Exception):
    """Updated information matrix failed its Cholesky check."""


class SingularD(Exception):
    """I_prev + J22 is not invertible in the envelope information update."""


@dataclass
class StateBelief:
    """Quadratic belief: location ``mean`` and negative Hessian ``info`` at
    the peak of the (approximate) value function."""

    mean: np.ndarray
    info: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.info = np.atleast_2d(np.asarray(self.info, dtype=float))
        m = self.mean.size
        if self.info.shape != (m, m):
            raise ValueError("info must be square and conformable with mean")

    def validate(self):
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("belief mean is not finite")
        chol_pd(self.info)
        return self

    @property
    def dim(self):
        return self.mean.size

    def cov(self):
        return np.linalg.inv(self.info)


def diffuse_belief(dim, mean=None, scale=1e4):
    """Belief for the unknown-constant initialisation: a large multiple of
    the identity as information... inverse, i.e. a nearly flat prior."""
    mean = np.zeros(dim) if mean is None else np.atleast_1d(np.asarray(mean, dtype=float))
    return StateBelief(mean, np.eye(dim) / scale)


@dataclass
class UpdateOptions:
    """Inner-optimiser configuration.

    method: search direction ('newton', 'fisher', 'bhhh', or 'auto' which
        picks Newton for families with nonnegative realised information and
        Fisher otherwise).
    update_method: information update ('newton', 'fisher', 'bhhh',
        'hybrid'); None derives it from the family like 'auto' does, with
        'hybrid' at the family's minimal admissible weight when realised
        information can be negative.
    """

    method: str = "auto"
    update_method: str | None = None
    hybrid_weight: float | None = None
    tol: float = 1e-4
    max_iter: int = 40
    damping: int = 10
    start: str = "prediction"
    fallback: bool = True

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("need tol > 0 and max_iter >= 1")

    def resolve(self, obs: ObservationModel):
        """(search method, update method, hybrid weight) for this family."""
        if self.method == "auto":
            search = "newton" if obs.realised_nonneg else "fisher"
        else:
            search = self.method
        upd = self.update_method
        if upd is None:
            if self.method in ("newton", "fisher", "bhhh"):
                upd = self.method
            else:
                upd = "newton" if obs.realised_nonneg else "hybrid"
        w = self.hybrid_weight
        if upd == "hybrid" and w is None:
            w = obs.hybrid_weight()
        return search, upd, w


@dataclass
class DecompositionTerms:
    """Per-step pieces of the estimation objective."""

    fit: float
    logdet_pred: float
    logdet_upd: float
    penalty: float

    @property
    def contribution(self):
        return self.fit + self.logdet_pred - self.logdet_upd - self.penalty


@dataclass
class FilterStepOutput:
    predicted: StateBelief
    updated: StateBelief
    revised_prev: np.ndarray | None
    iterations: int
    converged: bool
    objective_gain: float
    decomposition: DecompositionTerms | None = None
    skipped: bool = False
    safeguarded: bool = False


def _info_update_value(upd, w, I_pred, score, realised, expected):
    if upd == "newton":
        gain = realised
    elif upd == "fisher":
        gain = expected
    elif upd == "bhhh":
        gain = np.outer(score, score) if np.ndim(score) else score * score
    elif upd == "hybrid":
        gain = w * expected + (1.0 - w) * realised
    else:
        raise ValueError(f"unknown update method {upd!r}")
    return I_pred + gain


# ---------------------------------------------------------------------------
# scalar fast path (state dimension 1)
# ---------------------------------------------------------------------------

def _update1(obs, y, ap, ip, search, upd, w, tol, max_iter, damping,
             start, fallback):
    """Scalar-state update on plain floats.

    Returns (a_upd, I_upd, iterations, converged, gain, skipped, safeguarded,
    fit) where fit is the observation log-density at the update.
    """
    a = ap
    if start == "observation":
        a0 = obs.obs_argmax(y) if hasattr(obs, "obs_argmax") else None
        if a0 is not None and math.isfinite(a0):
            a = a0
    try:
        f, s, r, e = obs.eval1(y, a)
    except OverflowError:
        a = ap
        f, s, r, e = obs.eval1(y, a)
    v0 = obs.eval1(y, ap)[0] if a != ap else f
    cur = f - 0.5 * ip * (a - ap) ** 2
    skipped = safeguarded = False
    iterations = 0
    converged = False
    last_step = math.inf
    for it in range(max_iter):
        iterations = it + 1
        grad = s - ip * (a - ap)
        accepted = False
        if search == "newton":
            directions = (r, e)
        elif search == "bhhh":
            directions = (s * s,)
        else:
            directions = (e,)
        for attempt, h in enumerate(directions):
            denom = ip + h
            if denom <= 0.0:
                if attempt == 0 and search == "newton" and fallback:
                    continue
                if not fallback:
                    raise IndefiniteDirection("composite Hessian not positive definite")
                # escalate a ridge until the direction is defined
                delta = 1e-8
                while denom + delta <= 0.0 and delta < 1e12:
                    delta *= 10.0
                denom += delta
                safeguarded = True
            step = grad / denom
            if abs(step) < tol:
                # inside the quadratic basin; objective comparisons are noise
                a = a + step
                f, s, r, e = obs.eval1(y, a)
                cur = f - 0.5 * ip * (a - ap) ** 2
                last_step = abs(step)
                accepted = True
                break
            for _ in range(damping + 1):
                cand = a + step
                try:
                    fc, sc, rc, ec = obs.eval1(y, cand)
                    vc = fc - 0.5 * ip * (cand - ap) ** 2
                except (OverflowError, ValueError):
                    vc = -math.inf
                if vc >= cur:
                    a, f, s, r, e, cur = cand, fc, sc, rc, ec, vc
                    last_step = abs(step)
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
        if not accepted:
            if it == 0:
                skipped = True
                a = ap
                f, s, r, e = obs.eval1(y, ap)
                cur = f
            break
        if last_step < tol:
            converged = True
            break
    i_upd = _info_update_value(upd, w, ip, s, r, e)
    if i_upd <= 0.0:
        raise InfoNotPD("scalar updated information is not positive")
    if converged:
        # first-order condition residual on the updated-information scale
        converged = abs(s - ip * (a - ap)) <= 10.0 * tol * max(i_upd, ip)
    return a, i_upd, iterations, converged, cur - v0, skipped, safeguarded, f


# ---------------------------------------------------------------------------
# general (vector state) update
# ---------------------------------------------------------------------------

def _solve_pd(mat, vec):
    chol = np.linalg.cholesky(mat)
    return np.linalg.solve(chol.T, np.linalg.solve(chol, vec))


def _update_vec(obs, y, pred: StateBelief, search, upd, w, tol, max_iter,
                damping, start, fallback):
    ap, ip = pred.mean, pred.info
    a = ap.copy()
    if start == "observation":
        a0 = obs.obs_argmax(y) if hasattr(obs, "obs_argmax") else None
        if a0 is not None:
            a = np.atleast_1d(np.asarray(a0, dtype=float))
    ev = obs.eval(y, a)
    d0 = a - ap
    cur = ev.logpdf - 0.5 * float(d0 @ ip @ d0)
    v0 = obs.eval(y, ap).logpdf if np.any(a != ap) else ev.logpdf
    skipped = safeguarded = False
    iterations = 0
    converged = False
    last_step = math.inf
    for it in range(max_iter):
        iterations = it + 1
        grad = ev.score - ip @ (a - ap)
        accepted = False
        hessians = (ev.realised, ev.expected) if search == "newton" else (ev.expected,)
        if search == "bhhh":
            hessians = (np.outer(ev.score, ev.score),)
        for attempt, h in enumerate(hessians):
            k_mat = ip + h
            try:
                step = _solve_pd(k_mat, grad)
            except np.linalg.LinAlgError:
                if attempt == 0 and search == "newton" and fallback:
                    continue
                if not fallback:
                    raise IndefiniteDirection("composite Hessian not positive definite")
                delta = 1e-8
                while delta < 1e12:
                    try:
                        step = _solve_pd(k_mat + delta * np.eye(ap.size), grad)
                        break
                    except np.linalg.LinAlgError:
                        delta *= 10.0
                else:
                    break
                safeguarded = True
            if float(np.max(np.abs(step))) < tol:
                # inside the quadratic basin; objective comparisons are noise
                a = a + step
                ev = obs.eval(y, a)
                d_a = a - ap
                cur = ev.logpdf - 0.5 * float(d_a @ ip @ d_a)
                last_step = float(np.max(np.abs(step)))
                accepted = True
                break
            for _ in range(damping + 1):
                cand = a + step
                try:
                    ev_c = obs.eval(y, cand)
                    dc = cand - ap
                    vc = ev_c.logpdf - 0.5 * float(dc @ ip @ dc)
                except (OverflowError, ValueError):
                    vc = -math.inf
                if vc >= cur:
                    a, ev, cur = cand, ev_c, vc
                    last_step = float(np.max(np.abs(step)))
                    accepted = True
                    break
                step = step * 0.5
            if accepted:
                break
        if not accepted:
            if it == 0:
                skipped = True
                a = ap.copy()
                ev = obs.eval(y, ap)
                cur = ev.logpdf
            break
        if last_step < tol:
            converged = True
            break
    i_upd = _info_update_value(upd, w, ip, ev.score, ev.realised, ev.expected)
    i_upd = 0.5 * (i_upd + i_upd.T)
    try:
        chol_pd(i_upd)
    except ValueError as exc:
        raise InfoNotPD(str(exc)) from exc
    if converged:
        res = float(np.max(np.abs(ev.score - ip @ (a - ap))))
        scale = max(float(np.max(np.abs(i_upd))), float(np.max(np.abs(ip))))
        converged = res <= 10.0 * tol * scale
    return a, i_upd, iterations, converged, cur - v0, skipped, safeguarded, ev.logpdf


def _logdet_half(mat):
    sign, logdet = np.linalg.slogdet(np.atleast_2d(mat))
    if sign <= 0:
        raise InfoNotPD("information matrix has non-positive determinant")
    return 0.5 * logdet


def update_lg(obs: ObservationModel, y, pred: StateBelief,
              opts: UpdateOptions | None = None):
    """Measurement update against a predicted belief.

    Returns (updated belief, FilterStepOutput). A NaN observation is treated
    as missing: the belief passes through unchanged.
    """
    opts = opts or UpdateOptions()
    search, upd, w = opts.resolve(obs)
    if obs.is_missing(y):
        updated = StateBelief(pred.mean.copy(), pred.info.copy())
        dec = DecompositionTerms(0.0, _logdet_half(pred.info),
                                 _logdet_half(updated.info), 0.0)
        out = FilterStepOutput(pred, updated, None, 0, True, 0.0, dec)
        return updated, out
    obs.check_support(y)
    if pred.dim == 1 and obs.state_dim == 1:
        a, i_upd, iters, conv, gain, skipped, safe, fit = _update1(
            obs, y, float(pred.mean[0]), float(pred.info[0, 0]), search, upd,
            w, opts.tol, opts.max_iter, opts.damping, opts.start, opts.fallback)
        updated = StateBelief(np.array([a]), np.array([[i_upd]]))
        pen = 0.5 * float(pred.info[0, 0]) * (a - float(pred.mean[0])) ** 2
        dec = DecompositionTerms(fit, 0.5 * math.log(pred.info[0, 0]),
                                 0.5 * math.log(i_upd), pen)
    else:
        a, i_upd, iters, conv, gain, skipped, safe, fit = _update_vec(
            obs, y, pred, search, upd, w, opts.tol, opts.max_iter,
            opts.damping, opts.start, opts.fallback)
        updated = StateBelief(a, i_upd)
        d = a - pred.mean
        dec = DecompositionTerms(fit, _logdet_half(pred.info),
                                 _logdet_half(i_upd),
                                 0.5 * float(d @ pred.info @ d))
    out = FilterStepOutput(pred, updated, None, iters, conv, gain, dec,
                           skipped=skipped, safeguarded=safe)
    return updated, out


def _initial_belief(dyn, init):
    if init is None or init == "unconditional":
        mean, info = dyn.stationary_belief()
        return StateBelief(mean, info)
    if isinstance(init, StateBelief):
        return init
    raise ValueError("init must be 'unconditional' or a StateBelief")


def filter_lg(obs, dyn: LinearGaussianDynamics, data, opts=None,
              init="unconditional"):
    """Run the linear-Gaussian-state filter; returns a list of per-step
    FilterStepOutput."""
    opts = opts or UpdateOptions()
    belief = _initial_belief(dyn, init).validate()
    steps = []
    data = np.asarray(data, dtype=float)
    scalar = dyn.state_dim == 1
    for t in range(data.shape[0]):
        if scalar:
            # same arithmetic as the fast array path, so the two agree bitwise
            ip = 1.0 / (dyn.T[0, 0] ** 2 / belief.info[0, 0] + dyn.Q[0, 0])
            pred = StateBelief(dyn.predict(belief.mean), [[ip]])
        else:
            pred = StateBelief(dyn.predict(belief.mean),
                               predict_info_lg(dyn.T, dyn.Q, belief.info))
        try:
            belief, out = update_lg(obs, data[t], pred, opts)
        except (InfoNotPD, IndefiniteDirection) as exc:
            raise type(exc)(f"t={t}: {exc}") from exc
        steps.append(out)
    return steps


def filter_lg_arrays(obs, dyn, data, opts=None, init="unconditional"):
    """Array-returning scalar-state filter (fast path for studies and
    estimation); falls back to filter_lg for vector states.

    Returns dict with a_pred, I_pred, a_upd, I_upd, iterations, converged,
    skipped, decomposition (per-step contributions), objective.
    """
    opts = opts or UpdateOptions()
    data = np.asarray(data, dtype=float)
    if dyn.state_dim != 1 or obs.state_dim != 1:
        steps = filter_lg(obs, dyn, data, opts, init)
        return _steps_to_arrays(steps)
    search, upd, w = opts.resolve(obs)
    belief = _initial_belief(dyn, init).validate()
    a_prev = float(belief.mean[0])
    i_prev = float(belief.info[0, 0])
    c = float(dyn.c[0]); tt = float(dyn.T[0, 0]); q = float(dyn.Q[0, 0])
    n = data.shape[0]
    out = {k: np.empty(n) for k in
           ("a_pred", "I_pred", "a_upd", "I_upd", "decomposition")}
    iters = np.zeros(n, dtype=np.int64)
    conv = np.zeros(n, dtype=bool)
    skip = np.zeros(n, dtype=bool)
    tol, max_iter, damping = opts.tol, opts.max_iter, opts.damping
    missing = (np.isnan(data) if data.ndim == 1
               else np.any(np.isnan(data), axis=1))
    for t in range(n):
        ap = c + tt * a_prev
        ip = 1.0 / (tt * tt / i_prev + q)
        if missing[t]:
            a, iu, it_n, cv, sk, dec = ap, ip, 0, True, False, 0.0
        else:
            obs.check_support(data[t])
            a, iu, it_n, cv, gain, sk, safe, fit = _update1(
                obs, data[t], ap, ip, search, upd, w, tol, max_iter, damping,
                opts.start, opts.fallback)
            dec = (fit + 0.5 * math.log(ip) - 0.5 * math.log(iu)
                   - 0.5 * ip * (a - ap) ** 2)
        out["a_pred"][t] = ap
        out["I_pred"][t] = ip
        out["a_upd"][t] = a
        out["I_upd"][t] = iu
        out["decomposition"][t] = dec
        iters[t] = it_n
        conv[t] = cv
        skip[t] = sk
        a_prev, i_prev = a, iu
    out["iterations"] = iters
    out["converged"] = conv
    out["skipped"] = skip
    out["objective"] = float(out["decomposition"].sum())
    return out


def _steps_to_arrays(steps):
    n = len(steps)
    if n == 0:
        return {"a_pred": np.empty((0,)), "I_pred": np.empty((0,)),
                "a_upd": np.empty((0,)), "I_upd": np.empty((0,)),
                "iterations": np.empty(0, dtype=np.int64),
                "converged": np.empty(0, dtype=bool),
                "skipped": np.empty(0, dtype=bool),
                "decomposition": np.empty(0), "objective": 0.0}
    m = steps[0].predicted.dim
    shp = (n,) if m == 1 else (n, m)
    out = {
        "a_pred": np.empty(shp), "a_upd": np.empty(shp),
        "I_pred": np.empty((n,) if m == 1 else (n, m, m)),
        "I_upd": np.empty((n,) if m == 1 else (n, m, m)),
        "iterations": np.empty(n, dtype=np.int64),
        "converged": np.empty(n, dtype=bool),
        "skipped": np.empty(n, dtype=bool),
        "decomposition": np.empty(n),
    }
    for t, s in enumerate(steps):
        if m == 1:
            out["a_pred"][t] = s.predicted.mean[0]
            out["a_upd"][t] = s.updated.mean[0]
            out["I_pred"][t] = s.predicted.info[0, 0]
            out["I_upd"][t] = s.updated.info[0, 0]
        else:
            out["a_pred"][t] = s.predicted.mean
            out["a_upd"][t] = s.updated.mean
            out["I_pred"][t] = s.predicted.info
            out["I_upd"][t] = s.updated.info
        out["iterations"][t] = s.iterations
        out["converged"][t] = s.converged
        out["skipped"][t] = s.skipped
        out["decomposition"][t] = s.decomposition.contribution if s.decomposition else 0.0
    out["objective"] = float(out["decomposition"].sum())
    return out


# ---------------------------------------------------------------------------
# general transition (joint two-state Newton)
# ---------------------------------------------------------------------------

def info_update_general(derivs, obs_neg_hess, prev_info):
    """Envelope-theorem information update

        I_upd = J11 - J12 (I_prev + J22)^-1 J21 + (-d2 l(y|a)/da da')

    with ``obs_neg_hess`` the realised (Newton) or expected (Fisher)
    observation information, all evaluated at the joint peak.
    """
    d_mat = np.atleast_2d(prev_info) + derivs.J22
    try:
        chol = np.linalg.cholesky(d_mat)
    except np.linalg.LinAlgError as exc:
        raise SingularD("I_prev + J22 is not positive definite") from exc
    tmp = np.linalg.solve(chol, derivs.J21)
    out = derivs.J11 - tmp.T @ tmp + np.atleast_2d(obs_neg_hess)
    return 0.5 * (out + out.T)


def _predict_info_general(trans, a_pred, a_prev_mean, prev_info, mask=None,
                          sel=None):
    derivs = transition_derivatives(trans, a_pred, a_prev_mean)
    if mask is None:
        return info_update_general(derivs, np.zeros_like(derivs.J11), prev_info)
    # degenerate transition: reduce the stacked negative Hessian (without the
    # observation term) and Schur-project onto the current-state coordinates
    m = a_pred.size
    h_full = _stack_blocks(derivs, np.zeros((m, m)), prev_info)
    h_red = sel.T @ h_full @ sel
    return _schur_onto_current(0.5 * (h_red + h_red.T), mask, m)


def _stack_blocks(derivs, obs_neg_hess, prev_info):
    """Negative Hessian of the joint objective over (a_t, a_prev)."""
    top = np.hstack([derivs.J11 + obs_neg_hess, derivs.J12])
    bot = np.hstack([derivs.J21, derivs.J22 + prev_info])
    return np.vstack([top, bot])


def step_general(obs, trans, prev: StateBelief, y,
                 opts: UpdateOptions | None = None,
                 mask: DegeneracyMask | None = None) -> FilterStepOutput:
    """One joint Newton step-and-update for a general transition model.

    ``mask`` (or ``trans.mask``) declares coordinates of a_t that
    deterministically equal coordinates of a_prev; the joint optimisation
    then runs over the reduced free vector and the degenerate density part
    never gets evaluated.
    """
    opts = opts or UpdateOptions()
    search, upd, w = opts.resolve(obs)
    mask = mask if mask is not None else getattr(trans, "mask", None)
    m = prev.dim
    a_prev_mean, i_prev = prev.mean, prev.info
    a_pred = predict_state(trans, a_prev_mean)
    sel = mask.selection() if mask is not None else None
    i_pred = _predict_info_general(trans, a_pred, a_prev_mean, i_prev, mask, sel)
    predicted = StateBelief(a_pred, i_pred)

    missing = obs.is_missing(y) if hasattr(obs, "is_missing") else bool(np.any(np.isnan(y)))
    if missing:
        updated = StateBelief(a_pred.copy(), i_pred.copy())
        dec = DecompositionTerms(0.0, _logdet_half(i_pred), _logdet_half(i_pred), 0.0)
        return FilterStepOutput(predicted, updated, a_prev_mean.copy(), 0,
                                True, 0.0, dec)

    if mask is not None:
        # initial reduced vector: free a_t coords then a_prev
        x_red = np.concatenate([a_pred[list(mask.free_current)], a_prev_mean])
    else:
        x_red = np.concatenate([a_pred, a_prev_mean])

    def unpack(xv):
        if sel is None:
            return xv[:m], xv[m:]
        full = sel @ xv
        return full[:m], full[m:]

    def objective(xv):
        a_t, a_pr = unpack(xv)
        d = a_pr - a_prev_mean
        try:
            return (obs.eval(y, a_t).logpdf + trans.logpdf(a_t, a_pr)
                    - 0.5 * float(d @ i_prev @ d))
        except (OverflowError, ValueError):
            return -math.inf

    cur = objective(x_red)
    base = cur
    iterations = 0
    converged = False
    skipped = safeguarded = False
    last_step = math.inf
    for it in range(opts.max_iter):
        iterations = it + 1
        a_t, a_pr = unpack(x_red)
        ev = obs.eval(y, a_t)
        derivs = transition_derivatives(trans, a_t, a_pr)
        grad_full = np.concatenate([
            derivs.J1 + ev.score,
            derivs.J2 - i_prev @ (a_pr - a_prev_mean),
        ])
        accepted = False
        hess_opts = (ev.realised, ev.expected) if search == "newton" else (ev.expected,)
        for attempt, obs_h in enumerate(hess_opts):
            if sel is None:
                # Table-style block inversion on (a_t, a_prev)
                d_mat = i_prev + derivs.J22
                try:
                    d_chol = np.linalg.cholesky(d_mat)
                except np.linalg.LinAlgError:
                    if attempt + 1 < len(hess_opts):
                        continue
                    break
                d_inv = np.linalg.solve(d_chol.T, np.linalg.solve(d_chol, np.eye(m)))
                s_mat = derivs.J11 + obs_h - derivs.J12 @ d_inv @ derivs.J21
                try:
                    s_chol = np.linalg.cholesky(s_mat)
                except np.linalg.LinAlgError:
                    if attempt + 1 < len(hess_opts):
                        continue
                    break
                g1 = grad_full[:m]
                g2 = grad_full[m:]
                s_inv_g1 = np.linalg.solve(s_chol.T, np.linalg.solve(s_chol, g1))
                s_inv_j12 = np.linalg.solve(s_chol.T, np.linalg.solve(s_chol, derivs.J12))
                step_t = s_inv_g1 - s_inv_j12 @ (d_inv @ g2)
                step_p = (-d_inv @ derivs.J21 @ s_inv_g1
                          + (d_inv + d_inv @ derivs.J21 @ s_inv_j12 @ d_inv) @ g2)
                step = np.concatenate([step_t, step_p])
            else:
                h_full = _stack_blocks(derivs, obs_h, i_prev)
                h_red = sel.T @ h_full @ sel
                g_red = sel.T @ grad_full
                try:
                    step = _solve_pd(0.5 * (h_red + h_red.T), g_red)
                except np.linalg.LinAlgError:
                    if attempt + 1 < len(hess_opts):
                        continue
                    break
            if float(np.max(np.abs(step))) < opts.tol:
                # inside the quadratic basin; objective comparisons are noise
                x_red = x_red + step
                cur = objective(x_red)
                last_step = float(np.max(np.abs(step)))
                accepted = True
                break
            for _ in range(opts.damping + 1):
                cand = x_red + step
                vc = objective(cand)
                if vc >= cur:
                    x_red, cur = cand, vc
                    last_step = float(np.max(np.abs(step)))
                    accepted = True
                    break
                step = step * 0.5
            if accepted:
                break
        if not accepted:
            if it == 0:
                skipped = True
            break
        if last_step < opts.tol:
            converged = True
            break

    if skipped:
        updated = StateBelief(a_pred.copy(), i_pred.copy())
        a_rev = a_prev_mean.copy()
        dec = DecompositionTerms(float(obs.eval(y, a_pred).logpdf),
                                 _logdet_half(i_pred), _logdet_half(i_pred), 0.0)
        return FilterStepOutput(predicted, updated, a_rev, iterations, False,
                                0.0, dec, skipped=True)

    a_t, a_rev = unpack(x_red)
    ev = obs.eval(y, a_t)
    derivs = transition_derivatives(trans, a_t, a_rev)
    obs_h = _info_update_value(upd, w, np.zeros_like(ev.realised),
                               ev.score, ev.realised, ev.expected)
    if sel is None:
        i_upd = info_update_general(derivs, obs_h, i_prev)
    else:
        h_full = _stack_blocks(derivs, obs_h, i_prev)
        h_red = sel.T @ h_full @ sel
        i_upd = _schur_onto_current(h_red, mask, m)
    i_upd = 0.5 * (i_upd + i_upd.T)
    try:
        chol_pd(i_upd)
    except ValueError as exc:
        raise InfoNotPD(str(exc)) from exc
    updated = StateBelief(a_t, i_upd)
    d = a_t - a_pred
    dec = DecompositionTerms(ev.logpdf, _logdet_half(i_pred), _logdet_half(i_upd),
                             0.5 * float(d @ i_pred @ d))
    return FilterStepOutput(predicted, updated, a_rev, iterations, converged,
                            cur - base, dec, safeguarded=safeguarded)


def _schur_onto_current(h_red, mask: DegeneracyMask, m):
    """Reduce the joint negative Hessian onto the coordinates of a_t."""
    free = list(mask.free_current)
    nfree = len(free)
    keep = []
    pin = dict(mask.pinned)
    for i in range(m):
        if i in pin:
            keep.append(nfree + pin[i])
        else:
            keep.append(free.index(i))
    drop = [i for i in range(h_red.shape[0]) if i not in keep]
    if not drop:
        return h_red[np.ix_(keep, keep)]
    h_kk = h_red[np.ix_(keep, keep)]
    h_kd = h_red[np.ix_(keep, drop)]
    h_dd = h_red[np.ix_(drop, drop)]
    return h_kk - h_kd @ np.linalg.solve(h_dd, h_kd.T)


def filter_general(obs, trans, data, opts=None, init=None,
                   mask=None, obs_factory=None):
    """Run step_general over a series.

    ``obs_factory(t)``, when given, supplies a per-step observation
    evaluator (used by models whose density depends on lagged data);
    otherwise the fixed ``obs`` is used throughout.
    """
    opts = opts or UpdateOptions()
    data = np.asarray(data, dtype=float)
    if init is None:
        mean, info = trans.stationary_belief()
        belief = StateBelief(mean, info)
    else:
        belief = init
    belief.validate()
    steps = []
    for t in range(data.shape[0]):
        obs_t = obs_factory(t) if obs_factory is not None else obs
        out = step_general(obs_t, trans, belief, data[t], opts, mask=mask)
        steps.append(out)
        belief = out.updated
    return steps


def stability_jacobian(obs, y, pred: StateBelief, a_upd):
    """Sensitivity of the update to the prediction,

        d a_upd / d a_pred' = (I_pred - d2 l(y|a_upd))^-1 I_pred,

    together with its eigenvalue spectrum (real parts, ascending)."""
    ev = obs.eval(y, np.atleast_1d(np.asarray(a_upd, dtype=float)))
    k_mat = pred.info + ev.realised
    try:
        chol = np.linalg.cholesky(0.5 * (k_mat + k_mat.T))
    except np.linalg.LinAlgError as exc:
        raise IndefiniteDirection("I_pred - d2l is not positive definite") from exc
    jac = np.linalg.solve(chol.T, np.linalg.solve(chol, pred.info))
    eig = np.sort(np.linalg.eigvals(jac).real)
    return jac, eig
