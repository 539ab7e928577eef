"""Approximate maximum-likelihood estimation of constant parameters.

The criterion is the filter-implied decomposition: per-step observation fit
plus half log-determinants of the predicted and updated information
matrices minus the weighted squared prediction-to-update move,

    sum_t [ l(y_t|a_upd) + 1/2 logdet I_pred - 1/2 logdet I_upd
            - 1/2 (a_upd - a_pred)' I_pred (a_upd - a_pred) ].

On linear-Gaussian models this reproduces the exact prediction-error
log-likelihood; elsewhere it approximates it using only filter output.

Optimisation runs in unconstrained coordinates through smooth bijections
(Nelder-Mead soak, then a finite-difference BFGS polish). Standard errors
come from the numerical Hessian in unconstrained coordinates, mapped back
by the delta method.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .bellman import DecompositionTerms, UpdateOptions, filter_lg_arrays

__all__ = [
    "OutOfDomain",
    "FilterFailed",
    "NonFiniteObjective",
    "OptimFailed",
    "HessianNotInvertible",
    "Transform",
    "DecompositionTerms",
    "objective",
    "fit",
    "maximize",
    "FitOptions",
    "FitResult",
]


class OutOfDomain(Exception):
    """Natural parameter value outside the transform's domain."""


class FilterFailed(Exception):
    def __init__(self, t, cause):
        super().__init__(f"filter failed at t={t}: {cause}")
        self.t = t


class NonFiniteObjective(Exception):
    pass


class OptimFailed(Exception):
    """Optimiser found no admissible improvement over the initial guess."""


class HessianNotInvertible(Exception):
    """Numerical Hessian at the optimum could not be inverted; the estimate
    is still valid but standard errors are unavailable."""


# ---------------------------------------------------------------------------
# parameter transforms
# ---------------------------------------------------------------------------

# clamp leaves room for optimisers to move away from a boundary initial
# guess without tripping the stationarity checks downstream
_ATANH_CAP = 1.0 - 1e-7


def _atanh_fwd(x):
    # boundary values clamp to a finite image so optimisers can proceed from
    # an initial guess sitting exactly on the constraint
    if not -1.0 <= x <= 1.0:
        raise OutOfDomain(f"value {x} outside [-1, 1]")
    return math.atanh(max(-_ATANH_CAP, min(_ATANH_CAP, x)))


@dataclass
class Transform:
    """Bijection between named natural parameters and R^p.

    ``spec`` is a list of entries (name, kind) or (name, kind, opts) where
    kind is one of 'identity', 'log' (opts: lo, the lower bound, default 0),
    'atanh' for the interval (-1, 1), and 'ball' (opts: size) mapping an
    open-unit-ball block through the radial map rho = u * tanh(|u|)/|u|.
    """

    spec: list

    def __post_init__(self):
        self.names = []
        self._entries = []
        for entry in self.spec:
            name, kind = entry[0], entry[1]
            opts = entry[2] if len(entry) > 2 else {}
            if kind == "ball":
                size = int(opts.get("size", 1))
                self.names.extend(f"{name}{i}" for i in range(size))
                self._entries.append((name, kind, {"size": size}))
            elif kind in ("identity", "log", "atanh"):
                self.names.append(name)
                self._entries.append((name, kind, dict(opts)))
            else:
                raise ValueError(f"unknown transform kind {kind!r}")
        self.dim = len(self.names)

    def to_unconstrained(self, natural):
        natural = np.atleast_1d(np.asarray(natural, dtype=float))
        if natural.size != self.dim:
            raise ValueError(f"expected {self.dim} values, got {natural.size}")
        out = np.empty(self.dim)
        pos = 0
        for name, kind, opts in self._entries:
            if kind == "identity":
                out[pos] = natural[pos]
                pos += 1
            elif kind == "log":
                lo = opts.get("lo", 0.0)
                if natural[pos] <= lo:
                    raise OutOfDomain(f"{name}={natural[pos]} must exceed {lo}")
                out[pos] = math.log(natural[pos] - lo)
                pos += 1
            elif kind == "atanh":
                out[pos] = _atanh_fwd(natural[pos])
                pos += 1
            else:  # ball
                size = opts["size"]
                rho = natural[pos:pos + size]
                r = float(np.linalg.norm(rho))
                if r > 1.0:
                    raise OutOfDomain(f"{name}: squared norm {r**2:.4f} must be < 1")
                fac = math.atanh(min(r, _ATANH_CAP)) / r if r > 0 else 1.0
                out[pos:pos + size] = rho * fac
                pos += size
        return out

    def to_natural(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.empty(self.dim)
        pos = 0
        for name, kind, opts in self._entries:
            if kind == "identity":
                out[pos] = u[pos]
                pos += 1
            elif kind == "log":
                out[pos] = opts.get("lo", 0.0) + math.exp(u[pos])
                pos += 1
            elif kind == "atanh":
                out[pos] = math.tanh(u[pos])
                pos += 1
            else:
                size = opts["size"]
                uu = u[pos:pos + size]
                s = float(np.linalg.norm(uu))
                fac = math.tanh(s) / s if s > 0 else 1.0
                out[pos:pos + size] = uu * fac
                pos += size
        return out

    def jacobian(self, u, step=1e-6):
        """d natural / d unconstrained, by central differences (exact enough
        for delta-method standard errors)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        jac = np.empty((self.dim, self.dim))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = step
            jac[:, j] = (self.to_natural(u + e) - self.to_natural(u - e)) / (2 * step)
        return jac

    def pack(self, mapping):
        """Flatten a {name: value} dict (ball blocks as sequences) into the
        natural vector."""
        vals = []
        for name, kind, opts in self._entries:
            if kind == "ball":
                block = np.atleast_1d(np.asarray(mapping[name], dtype=float))
                if block.size != opts["size"]:
                    raise ValueError(f"{name} must have {opts['size']} entries")
                vals.extend(block.tolist())
            else:
                vals.append(float(mapping[name]))
        return np.array(vals)

    def unpack(self, natural):
        natural = np.atleast_1d(np.asarray(natural, dtype=float))
        out = {}
        pos = 0
        for name, kind, opts in self._entries:
            if kind == "ball":
                size = opts["size"]
                out[name] = natural[pos:pos + size].copy()
                pos += size
            else:
                out[name] = float(natural[pos])
                pos += 1
        return out


# ---------------------------------------------------------------------------
# objective and fitting
# ---------------------------------------------------------------------------

def objective(bundle, psi, data, filter_opts=None):
    """Decomposition objective for a model bundle at natural parameters
    ``psi`` (dict or vector). Deterministic given (psi, data)."""
    obs, dyn = bundle.build(psi)
    try:
        res = filter_lg_arrays(obs, dyn, data, opts=filter_opts)
    except Exception as exc:  # noqa: BLE001 - any filter failure aborts the value
        raise FilterFailed(getattr(exc, "t", -1), exc) from exc
    val = res["objective"]
    if not np.isfinite(val):
        raise NonFiniteObjective(f"objective evaluated to {val}")
    return float(val)


@dataclass
class FitOptions:
    max_nm_iter: int = 250            # per unconstrained coordinate
    nm_xatol: float = 1e-4
    nm_fatol: float = 1e-4
    polish: bool = True
    polish_step: float = 1e-4
    polish_maxiter: int = 60
    compute_se: bool = True
    se_step: float = 1e-4


@dataclass
class FitResult:
    params: dict
    se: dict | None
    objective: float
    n_eval: int
    converged: bool
    message: str = ""
    natural: np.ndarray = field(default=None, repr=False)
    unconstrained: np.ndarray = field(default=None, repr=False)


def maximize(obj_fn, transform: Transform, init_natural, options=None) -> FitResult:
    """Maximise ``obj_fn`` (a function of the natural parameter vector) over
    the transform's unconstrained image. Failed evaluations count as -inf so
    the optimiser backs away from flawed parameter values."""
    options = options or FitOptions()
    x0 = transform.to_unconstrained(np.asarray(init_natural, dtype=float))
    n_eval = [0]

    def neg(u):
        n_eval[0] += 1
        try:
            val = obj_fn(transform.to_natural(u))
        except (FilterFailed, NonFiniteObjective, OutOfDomain,
                FloatingPointError, np.linalg.LinAlgError, ValueError,
                OverflowError, ZeroDivisionError):
            return np.inf
        if not np.isfinite(val):
            return np.inf
        return -val

    res = optimize.minimize(
        neg, x0, method="Nelder-Mead",
        options={"maxiter": options.max_nm_iter * max(1, x0.size),
                 "xatol": options.nm_xatol, "fatol": options.nm_fatol,
                 "adaptive": x0.size > 4})
    best_u, best_f = res.x, res.fun
    message = res.message
    if options.polish and np.isfinite(best_f):
        pol = optimize.minimize(neg, best_u, method="BFGS",
                                options={"eps": options.polish_step,
                                         "maxiter": options.polish_maxiter})
        if np.isfinite(pol.fun) and pol.fun <= best_f:
            best_u, best_f = pol.x, pol.fun
    f0 = neg(x0)
    if not np.isfinite(best_f) or best_f > f0 + 1e-9:
        raise OptimFailed("no admissible improvement over the initial guess")

    se_nat = None
    if options.compute_se:
        try:
            se_nat = _delta_method_se(neg, best_u, transform, options.se_step)
        except HessianNotInvertible:
            se_nat = None
    natural = transform.to_natural(best_u)
    params = transform.unpack(natural)
    se = transform.unpack(se_nat) if se_nat is not None else None
    return FitResult(params=params, se=se, objective=-best_f, n_eval=n_eval[0],
                     converged=bool(res.success or options.polish),
                     message=str(message), natural=natural, unconstrained=best_u)


def _delta_method_se(neg, u, transform, step):
    dim = u.size
    hess = np.empty((dim, dim))
    f0 = neg(u)
    steps = step * np.maximum(1.0, np.abs(u))
    for i in range(dim):
        ei = np.zeros(dim); ei[i] = steps[i]
        fpp, fmm = neg(u + ei), neg(u - ei)
        hess[i, i] = (fpp - 2 * f0 + fmm) / steps[i] ** 2
        for j in range(i + 1, dim):
            ej = np.zeros(dim); ej[j] = steps[j]
            fa = neg(u + ei + ej); fb = neg(u + ei - ej)
            fc = neg(u - ei + ej); fd = neg(u - ei - ej)
            hess[i, j] = hess[j, i] = (fa - fb - fc + fd) / (4 * steps[i] * steps[j])
    if not np.all(np.isfinite(hess)):
        raise HessianNotInvertible("non-finite numerical Hessian")
    try:
        cov_u = np.linalg.inv(0.5 * (hess + hess.T))
    except np.linalg.LinAlgError as exc:
        raise HessianNotInvertible(str(exc)) from exc
    if np.any(np.diag(cov_u) <= 0):
        raise HessianNotInvertible("Hessian not positive definite at optimum")
    jac = transform.jacobian(u)
    cov_nat = jac @ cov_u @ jac.T
    diag = np.diag(cov_nat).copy()
    if np.any(diag < 0):
        raise HessianNotInvertible("negative delta-method variance")
    return np.sqrt(diag)


def fit(bundle, data, init=None, options=None, filter_opts=None) -> FitResult:
    """Estimate a bundle's parameters on ``data``.

    The criterion is the decomposition objective unless the bundle supplies
    its own through ``make_objective`` (the quasi-likelihood and
    particle-filter baselines do). ``init`` is a {name: value} dict and
    defaults to the bundle's suggestion."""
    transform = bundle.transform()
    if init is None:
        init = bundle.init_guess(data)
    init_vec = transform.pack(init) if isinstance(init, dict) else np.asarray(init, dtype=float)
    fopts = filter_opts if filter_opts is not None else UpdateOptions()

    if hasattr(bundle, "make_objective"):
        inner = bundle.make_objective(data, fopts)

        def obj_fn(natural):
            return inner(transform.unpack(natural))
    else:
        def obj_fn(natural):
            return objective(bundle, transform.unpack(natural), data, fopts)

    return maximize(obj_fn, transform, init_vec, options)
