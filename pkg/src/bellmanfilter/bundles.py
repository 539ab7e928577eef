"""Model bundles: observation family + state dynamics + parameter layout.

A bundle knows how to build the (observation, dynamics) pair from a natural
parameter dict, which transforms estimation should use, how to simulate a
series with its latent path, and what a sensible neutral starting guess is.
The study harness and the CLI speak exclusively through bundles.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import LinearGaussianDynamics
from .estimation import Transform
from .kalman import kalman_loglik, qmle_transforms
from .obsmodels import get_model

__all__ = ["ScalarModelBundle", "QmleKalmanBundle", "make_bundle",
           "DEFAULT_TRUE_PARAMS"]

# Simulation-study defaults: AR(1) signal with c=0, T=0.98, Q=0.0225 except
# the dependence families (c=0.02, T=0.98, Q=0.01); shape parameters
# kappa=4 (negbin), 1.5 (gamma), 1.2 (weibull), nu=10 (t families) except
# the local level (nu=3, sigma=0.45).
DEFAULT_TRUE_PARAMS = {
    "poisson": {"c": 0.0, "T": 0.98, "Q": 0.0225},
    "negbin": {"c": 0.0, "T": 0.98, "Q": 0.0225, "kappa": 4.0},
    "exponential": {"c": 0.0, "T": 0.98, "Q": 0.0225},
    "gamma": {"c": 0.0, "T": 0.98, "Q": 0.0225, "kappa": 1.5},
    "weibull": {"c": 0.0, "T": 0.98, "Q": 0.0225, "kappa": 1.2},
    "sv-gauss": {"c": 0.0, "T": 0.98, "Q": 0.0225},
    "sv-t": {"c": 0.0, "T": 0.98, "Q": 0.0225, "nu": 10.0},
    "dep-gauss": {"c": 0.02, "T": 0.98, "Q": 0.01},
    "dep-t": {"c": 0.02, "T": 0.98, "Q": 0.01, "nu": 10.0},
    "local-level-t": {"c": 0.0, "T": 0.98, "Q": 0.0225, "nu": 3.0, "sigma": 0.45},
}

_SHAPE_NAMES = {
    "negbin": ("kappa",),
    "gamma": ("kappa",),
    "weibull": ("kappa",),
    "sv-t": ("nu",),
    "dep-t": ("nu",),
    "local-level-t": ("nu", "sigma"),
}

_SHAPE_TRANSFORM = {
    "kappa": ("log", {}),
    "nu": ("log", {"lo": 2.0}),
    "sigma": ("log", {}),
}


@dataclass
class ScalarModelBundle:
    """Scalar AR(1) signal driving one of the registered observation
    families. ``estimate_shapes`` lists shape parameters included in the
    estimation; the rest stay fixed at their configured values."""

    obs_id: str
    shapes: dict = field(default_factory=dict)
    estimate_shapes: tuple = ()

    def __post_init__(self):
        if self.obs_id not in DEFAULT_TRUE_PARAMS:
            raise KeyError(f"no bundle for observation model {self.obs_id!r}")
        defaults = DEFAULT_TRUE_PARAMS[self.obs_id]
        for name in _SHAPE_NAMES.get(self.obs_id, ()):
            self.shapes.setdefault(name, defaults[name])
        bad = set(self.estimate_shapes) - set(_SHAPE_NAMES.get(self.obs_id, ()))
        if bad:
            raise ValueError(f"{self.obs_id} has no shape parameters {sorted(bad)}")

    @property
    def param_names(self):
        return ("c", "T", "Q") + tuple(self.estimate_shapes)

    def transform(self) -> Transform:
        spec = [("c", "identity"), ("T", "atanh"), ("Q", "log")]
        for name in self.estimate_shapes:
            kind, opts = _SHAPE_TRANSFORM[name]
            spec.append((name, kind, opts))
        return Transform(spec)

    def _shape_values(self, psi):
        shapes = dict(self.shapes)
        for name in _SHAPE_NAMES.get(self.obs_id, ()):
            if name in psi:
                shapes[name] = psi[name]
        return shapes

    def build(self, psi):
        obs = get_model(self.obs_id, **self._shape_values(psi))
        dyn = LinearGaussianDynamics([psi["c"]], [[psi["T"]]], [[psi["Q"]]])
        return obs, dyn

    def true_params(self):
        out = dict(DEFAULT_TRUE_PARAMS[self.obs_id])
        out.update(self.shapes)
        return out

    def init_guess(self, data=None):
        guess = {"c": 0.0, "T": 0.9, "Q": 0.05}
        defaults = self.true_params()
        for name in self.estimate_shapes:
            guess[name] = defaults[name]
        return guess

    def simulate(self, psi, n, rng, burn=200):
        """Simulate (y, alpha): the latent AR(1) path and observations."""
        c, t_coef, q = psi["c"], psi["T"], psi["Q"]
        if abs(t_coef) >= 1:
            raise ValueError("simulation needs a stationary signal (|T| < 1)")
        total = n + burn
        alpha = np.empty(total)
        alpha[0] = c / (1 - t_coef) + math.sqrt(q / (1 - t_coef ** 2)) * rng.standard_normal()
        shocks = math.sqrt(q) * rng.standard_normal(total)
        for s in range(1, total):
            alpha[s] = c + t_coef * alpha[s - 1] + shocks[s]
        alpha = alpha[burn:]
        obs = get_model(self.obs_id, **self._shape_values(psi))
        return obs.sample(alpha, rng), alpha


@dataclass
class QmleKalmanBundle:
    """Quasi-likelihood Kalman baseline for the volatility and local-level
    families: the data are linearized (log of squares for volatility,
    pass-through for the local level) and (c, T, Q) plus, for the local
    level, the observation variance H are estimated by exact Gaussian
    maximum likelihood."""

    family: str
    shapes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("sv-gauss", "sv-t", "local-level-t"):
            raise ValueError("QMLE baseline covers sv-gauss, sv-t, local-level-t")
        defaults = DEFAULT_TRUE_PARAMS[self.family]
        for name in _SHAPE_NAMES.get(self.family, ()):
            self.shapes.setdefault(name, defaults[name])

    @property
    def estimates_h(self):
        return self.family == "local-level-t"

    @property
    def param_names(self):
        return ("c", "T", "Q", "H") if self.estimates_h else ("c", "T", "Q")

    def transform(self) -> Transform:
        spec = [("c", "identity"), ("T", "atanh"), ("Q", "log")]
        if self.estimates_h:
            spec.append(("H", "log"))
        return Transform(spec)

    def _transformed(self, data):
        return qmle_transforms(self.family, data,
                               nu=self.shapes.get("nu"),
                               sigma=self.shapes.get("sigma"))

    def init_guess(self, data=None):
        guess = {"c": 0.0, "T": 0.9, "Q": 0.05}
        if self.estimates_h:
            sig = self.shapes.get("sigma", 0.45)
            guess["H"] = sig ** 2
        return guess

    def make_objective(self, data, filter_opts=None):
        tr = self._transformed(np.asarray(data, dtype=float))

        def loglik(psi):
            dyn = LinearGaussianDynamics([psi["c"]], [[psi["T"]]], [[psi["Q"]]])
            obs = tr.obs
            if self.estimates_h:
                from .obsmodels import LinearGaussianObservation
                obs = LinearGaussianObservation(tr.obs.d, tr.obs.Z, [[psi["H"]]])
            return kalman_loglik(obs, dyn, tr.data)

        return loglik

    def filter_states(self, psi, data):
        """Predicted and updated state means under the fitted linear model."""
        from .kalman import kalman_filter
        tr = self._transformed(np.asarray(data, dtype=float))
        obs = tr.obs
        if self.estimates_h:
            from .obsmodels import LinearGaussianObservation
            obs = LinearGaussianObservation(tr.obs.d, tr.obs.Z, [[psi["H"]]])
        dyn = LinearGaussianDynamics([psi["c"]], [[psi["T"]]], [[psi["Q"]]])
        out = kalman_filter(obs, dyn, tr.data)
        return out["a_pred"][:, 0], out["a_upd"][:, 0]


def make_bundle(obs_id, shapes=None, estimate_shapes=()):
    return ScalarModelBundle(obs_id, dict(shapes or {}), tuple(estimate_shapes))
