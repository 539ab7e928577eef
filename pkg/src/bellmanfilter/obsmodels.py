"""Observation densities: log-density, score, realised and expected information.

Each family maps a latent signal alpha through a link function to the
parameter of the observation density.  Student's t families use the
variance-normalized parametrization: the squared scale appearing inside the
density is (nu - 2) * sigma^2, so that sigma^2 is the actual noise variance
for every nu > 2.  This differs from the textbook t, where the variance
would be sigma^2 * nu / (nu - 2).

Scalar-signal families expose a fast scalar path ``eval1`` (plain floats)
used by the filter inner loops, plus an array interface ``eval``/``logpdf``
used everywhere else.  The two are cross-checked in the test suite.
"""

import math
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

__all__ = [
    "OutOfSupport",
    "DegenerateParams",
    "NotApplicable",
    "ObsEval",
    "ObservationModel",
    "LinearGaussianObservation",
    "get_model",
    "MODEL_IDS",
]


class OutOfSupport(Exception):
    """Observation outside the family's support (corrupt data fails loudly)."""


class DegenerateParams(Exception):
    """Shape parameters violate the family's constraints (e.g. nu <= 2)."""


class NotApplicable(Exception):
    """Hybrid weight requested for a family whose realised information is
    nonnegative; pure Newton applies there."""


class ObsEval(NamedTuple):
    logpdf: float
    score: np.ndarray
    realised: np.ndarray
    expected: np.ndarray


class ObservationModel:
    """Base contract: log-density, score, realised/expected information,
    link, sampler.  Scalar-signal subclasses implement ``_eval1`` and
    ``_logpdf_np``."""

    id = ""
    obs_dim = 1
    state_dim = 1          # state coordinates the density reads
    realised_nonneg = True # realised information >= 0 for all y

    # -- scalar fast path ------------------------------------------------
    def eval1(self, y, a):
        """(logpdf, score, realised, expected) as plain floats at scalar state a."""
        raise NotImplementedError

    def logpdf1(self, y, a):
        return self.eval1(y, a)[0]

    # -- array interface -------------------------------------------------
    def eval(self, y, a) -> ObsEval:
        """Evaluate all four quantities at state vector ``a`` (shape (1,))."""
        self.check_support(y)
        a = np.atleast_1d(np.asarray(a, dtype=float))
        if a.size != 1:
            raise ValueError(f"{self.id} reads a scalar signal, got state dim {a.size}")
        f, s, r, e = self.eval1(y, float(a[0]))
        return ObsEval(f, np.array([s]), np.array([[r]]), np.array([[e]]))

    def logpdf(self, y, a):
        """Log-density; ``a`` may be a scalar or an array of signal values."""
        self.check_support(y)
        return self._logpdf_np(y, np.asarray(a, dtype=float))

    def _logpdf_np(self, y, alpha):
        raise NotImplementedError

    # -- everything else -------------------------------------------------
    def check_support(self, y):
        if not np.all(np.isfinite(np.asarray(y, dtype=float))):
            raise OutOfSupport(f"{self.id}: non-finite observation {y!r}")

    def link(self, a):
        """Signal on its interpretable scale (intensity, variance, correlation...)."""
        raise NotImplementedError

    def predict_signal(self, a):
        """Quantity compared against the simulated truth in studies.

        Coincides with ``link`` except: duration families report the
        conditional mean of the data (kappa*beta, Gamma(1+1/kappa)*beta) and
        volatility families report the standard deviation exp(a/2).
        """
        return self.link(a)

    def sample(self, alpha, rng):
        """Draw observations at signal(s) ``alpha``; deterministic given ``rng``."""
        raise NotImplementedError

    def hybrid_weight(self):
        """Minimal weight on the Fisher term guaranteeing an information gain.

        Only defined for the families whose realised information can turn
        negative; everything else uses pure Newton updates.
        """
        raise NotApplicable(f"{self.id}: realised information is nonnegative")

    def obs_argmax(self, y):
        """argmax over the signal of the single-observation log-density, when
        it exists in closed form (alternative start for the inner optimiser)."""
        return None

    def is_missing(self, y):
        return bool(np.any(np.isnan(np.asarray(y, dtype=float))))


def _check_count(model_id, y):
    yf = float(y)
    if not np.isfinite(yf) or yf < 0 or yf != int(yf):
        raise OutOfSupport(f"{model_id}: need a nonnegative integer count, got {y!r}")


class Poisson(ObservationModel):
    """Counts with intensity lambda = exp(alpha)."""

    id = "poisson"

    def eval1(self, y, a):
        lam = math.exp(a)
        f = y * a - lam - math.lgamma(y + 1.0)
        return f, y - lam, lam, lam

    def _logpdf_np(self, y, alpha):
        lam = np.exp(alpha)
        return y * alpha - lam - gammaln(y + 1.0)

    def check_support(self, y):
        _check_count(self.id, y)

    def link(self, a):
        return np.exp(a)

    def obs_argmax(self, y):
        return math.log(y) if y > 0 else None

    def sample(self, alpha, rng):
        return rng.poisson(np.exp(alpha)).astype(float)


class NegativeBinomial(ObservationModel):
    """Overdispersed counts; kappa is the dispersion, mean lambda = exp(alpha)."""

    id = "negbin"

    def __init__(self, kappa=4.0):
        if kappa <= 0:
            raise DegenerateParams("negbin: kappa must be positive")
        self.kappa = float(kappa)

    def eval1(self, y, a):
        k = self.kappa
        lam = math.exp(a)
        f = (math.lgamma(k + y) - math.lgamma(k) - math.lgamma(y + 1.0)
             + k * math.log(k / (k + lam)) + y * (a - math.log(k + lam)))
        score = y - lam * (k + y) / (k + lam)
        realised = k * lam * (k + y) / (k + lam) ** 2
        expected = k * lam / (k + lam)
        return f, score, realised, expected

    def _logpdf_np(self, y, alpha):
        k = self.kappa
        lam = np.exp(alpha)
        return (gammaln(k + y) - gammaln(k) - gammaln(y + 1.0)
                + k * np.log(k / (k + lam)) + y * (alpha - np.log(k + lam)))

    def check_support(self, y):
        _check_count(self.id, y)

    def link(self, a):
        return np.exp(a)

    def obs_argmax(self, y):
        return math.log(y) if y > 0 else None

    def sample(self, alpha, rng):
        lam = np.exp(np.asarray(alpha, dtype=float))
        return rng.negative_binomial(self.kappa, self.kappa / (self.kappa + lam)).astype(float)


class Exponential(ObservationModel):
    """Durations with hazard lambda = exp(alpha)."""

    id = "exponential"

    def eval1(self, y, a):
        lam = math.exp(a)
        return a - lam * y, 1.0 - lam * y, lam * y, 1.0

    def _logpdf_np(self, y, alpha):
        return alpha - np.exp(alpha) * y

    def check_support(self, y):
        if not np.isfinite(y) or y < 0:
            raise OutOfSupport(f"exponential: need y >= 0, got {y!r}")

    def link(self, a):
        return np.exp(a)

    def obs_argmax(self, y):
        return -math.log(y) if y > 0 else None

    def sample(self, alpha, rng):
        return rng.exponential(np.exp(-np.asarray(alpha, dtype=float)))


class Gamma(ObservationModel):
    """Durations, shape kappa and scale beta = exp(alpha)."""

    id = "gamma"

    def __init__(self, kappa=1.5):
        if kappa <= 0:
            raise DegenerateParams("gamma: kappa must be positive")
        self.kappa = float(kappa)

    def eval1(self, y, a):
        k = self.kappa
        r = y * math.exp(-a)
        f = (k - 1.0) * math.log(y) - r - math.lgamma(k) - k * a
        return f, r - k, r, k

    def _logpdf_np(self, y, alpha):
        k = self.kappa
        return (k - 1.0) * np.log(y) - y * np.exp(-alpha) - gammaln(k) - k * alpha

    def check_support(self, y):
        if not np.isfinite(y) or y <= 0:
            raise OutOfSupport(f"gamma: need y > 0, got {y!r}")

    def link(self, a):
        return np.exp(a)

    def predict_signal(self, a):
        # conditional mean of the data: kappa * beta
        return self.kappa * np.exp(a)

    def obs_argmax(self, y):
        return math.log(y / self.kappa)

    def sample(self, alpha, rng):
        return rng.gamma(self.kappa, np.exp(np.asarray(alpha, dtype=float)))


class Weibull(ObservationModel):
    """Durations, shape kappa and scale beta = exp(alpha)."""

    id = "weibull"

    def __init__(self, kappa=1.2):
        if kappa <= 0:
            raise DegenerateParams("weibull: kappa must be positive")
        self.kappa = float(kappa)

    def eval1(self, y, a):
        k = self.kappa
        r = (y * math.exp(-a)) ** k
        f = math.log(k) + (k - 1.0) * math.log(y) - k * a - r
        return f, k * r - k, k * k * r, k * k

    def _logpdf_np(self, y, alpha):
        k = self.kappa
        return np.log(k) + (k - 1.0) * np.log(y) - k * alpha - (y * np.exp(-alpha)) ** k

    def check_support(self, y):
        if not np.isfinite(y) or y <= 0:
            raise OutOfSupport(f"weibull: need y > 0, got {y!r}")

    def link(self, a):
        return np.exp(a)

    def predict_signal(self, a):
        # conditional mean of the data: Gamma(1 + 1/kappa) * beta
        return math.gamma(1.0 + 1.0 / self.kappa) * np.exp(a)

    def obs_argmax(self, y):
        return math.log(y)

    def sample(self, alpha, rng):
        alpha = np.asarray(alpha, dtype=float)
        return np.exp(alpha) * rng.weibull(self.kappa, size=alpha.shape)


class GaussianVolatility(ObservationModel):
    """Zero-mean Gaussian returns with variance sigma_t^2 = exp(alpha)."""

    id = "sv-gauss"

    def eval1(self, y, a):
        q = y * y * math.exp(-a) / 2.0
        f = -0.5 * math.log(2.0 * math.pi) - 0.5 * a - q
        return f, q - 0.5, q, 0.5

    def _logpdf_np(self, y, alpha):
        return -0.5 * np.log(2.0 * np.pi) - 0.5 * alpha - y * y * np.exp(-alpha) / 2.0

    def link(self, a):
        return np.exp(a)

    def predict_signal(self, a):
        return np.exp(0.5 * np.asarray(a, dtype=float))

    def obs_argmax(self, y):
        return math.log(y * y) if y != 0 else None

    def sample(self, alpha, rng):
        alpha = np.asarray(alpha, dtype=float)
        return np.exp(alpha / 2.0) * rng.standard_normal(alpha.shape)


class StudentTVolatility(ObservationModel):
    """Heavy-tailed returns with variance sigma_t^2 = exp(alpha), nu > 2."""

    id = "sv-t"

    def __init__(self, nu=10.0):
        if nu <= 2:
            raise DegenerateParams("sv-t: variance normalization requires nu > 2")
        self.nu = float(nu)
        self._const = (math.lgamma((self.nu + 1) / 2) - math.lgamma(self.nu / 2)
                       - 0.5 * math.log((self.nu - 2) * math.pi))

    def eval1(self, y, a):
        nu = self.nu
        u = y * y * math.exp(-a)
        f = self._const - 0.5 * a - (nu + 1) / 2.0 * math.log1p(u / (nu - 2))
        om = (nu + 1) / (nu - 2 + u)
        score = om * u / 2.0 - 0.5
        realised = (nu - 2) / (nu + 1) * om * om * u / 2.0
        return f, score, realised, nu / (2 * nu + 6)

    def _logpdf_np(self, y, alpha):
        nu = self.nu
        u = y * y * np.exp(-alpha)
        return self._const - 0.5 * alpha - (nu + 1) / 2.0 * np.log1p(u / (nu - 2))

    def link(self, a):
        return np.exp(a)

    def predict_signal(self, a):
        return np.exp(0.5 * np.asarray(a, dtype=float))

    def obs_argmax(self, y):
        if y == 0:
            return None
        return math.log(self.nu * y * y / (self.nu - 2))

    def sample(self, alpha, rng):
        alpha = np.asarray(alpha, dtype=float)
        scale = math.sqrt((self.nu - 2) / self.nu)
        return np.exp(alpha / 2.0) * scale * rng.standard_t(self.nu, size=alpha.shape)


def _corr_link(a):
    # (1 - exp(-a)) / (1 + exp(-a)) = tanh(a/2), monotone onto (-1, 1)
    return np.tanh(np.asarray(a, dtype=float) / 2.0)


class GaussianDependence(ObservationModel):
    """Bivariate standard Gaussian pair with correlation rho_t = tanh(alpha/2)."""

    id = "dep-gauss"
    obs_dim = 2
    realised_nonneg = False

    def eval1(self, y, a):
        y1, y2 = float(y[0]), float(y[1])
        rho = math.tanh(a / 2.0)
        omr = 1.0 - rho * rho
        z1, z2 = y1 - rho * y2, y2 - rho * y1
        f = (-math.log(2.0 * math.pi) - 0.5 * math.log(omr)
             - (y1 * y1 + y2 * y2 - 2.0 * rho * y1 * y2) / (2.0 * omr))
        score = rho / 2.0 + z1 * z2 / (2.0 * omr)
        realised = (z1 * z1 + z2 * z2) / (4.0 * omr) - omr / 4.0
        expected = (1.0 + rho * rho) / 4.0
        return f, score, realised, expected

    def _logpdf_np(self, y, alpha):
        y1, y2 = float(y[0]), float(y[1])
        rho = _corr_link(alpha)
        omr = 1.0 - rho * rho
        return (-np.log(2.0 * np.pi) - 0.5 * np.log(omr)
                - (y1 * y1 + y2 * y2 - 2.0 * rho * y1 * y2) / (2.0 * omr))

    def check_support(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (2,) or not np.all(np.isfinite(y)):
            raise OutOfSupport("dep-gauss: need a finite pair (y1, y2)")

    def link(self, a):
        return _corr_link(a)

    def sample(self, alpha, rng):
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        rho = np.tanh(alpha / 2.0)
        z = rng.standard_normal((alpha.size, 2))
        y1 = z[:, 0]
        y2 = rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1]
        return np.column_stack([y1, y2])

    def hybrid_weight(self):
        return 0.5


class StudentTDependence(ObservationModel):
    """Bivariate t pair, unit variances, correlation rho_t = tanh(alpha/2)."""

    id = "dep-t"
    obs_dim = 2
    realised_nonneg = False

    def __init__(self, nu=10.0):
        if nu <= 2:
            raise DegenerateParams("dep-t: variance normalization requires nu > 2")
        self.nu = float(nu)

    def eval1(self, y, a):
        nu = self.nu
        y1, y2 = float(y[0]), float(y[1])
        rho = math.tanh(a / 2.0)
        omr = 1.0 - rho * rho
        z1, z2 = y1 - rho * y2, y2 - rho * y1
        q = (y1 * y1 + y2 * y2 - 2.0 * rho * y1 * y2) / omr
        f = (math.log(nu) - math.log(2.0 * math.pi * (nu - 2)) - 0.5 * math.log(omr)
             - (nu + 2) / 2.0 * math.log1p(q / (nu - 2)))
        om = (nu + 2) / (nu - 2 + q)
        score = rho / 2.0 + om * z1 * z2 / (2.0 * omr)
        # Second derivative of the log-density; the final term carries the
        # squared product (z1*z2)^2 coming from d(omega)/d(alpha).
        realised = (om * (z1 * z1 + z2 * z2) / (4.0 * omr) - omr / 4.0
                    - om * om * (z1 * z2) ** 2 / (2.0 * (nu + 2) * omr * omr))
        expected = (2.0 + nu * (1.0 + rho * rho)) / (4.0 * (nu + 4))
        return f, score, realised, expected

    def _logpdf_np(self, y, alpha):
        nu = self.nu
        y1, y2 = float(y[0]), float(y[1])
        rho = _corr_link(alpha)
        omr = 1.0 - rho * rho
        q = (y1 * y1 + y2 * y2 - 2.0 * rho * y1 * y2) / omr
        return (np.log(nu) - np.log(2.0 * np.pi * (nu - 2)) - 0.5 * np.log(omr)
                - (nu + 2) / 2.0 * np.log1p(q / (nu - 2)))

    def check_support(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (2,) or not np.all(np.isfinite(y)):
            raise OutOfSupport("dep-t: need a finite pair (y1, y2)")

    def link(self, a):
        return _corr_link(a)

    def sample(self, alpha, rng):
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        rho = np.tanh(alpha / 2.0)
        z = rng.standard_normal((alpha.size, 2))
        w = rng.chisquare(self.nu, alpha.size)
        fac = np.sqrt((self.nu - 2) / w)
        y1 = z[:, 0] * fac
        y2 = (rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1]) * fac
        return np.column_stack([y1, y2])

    def hybrid_weight(self):
        return 0.5 * (self.nu + 4) / (self.nu + 3)


class StudentTLocalLevel(ObservationModel):
    """Location signal mu_t = alpha with additive scaled-t noise, Var = sigma^2."""

    id = "local-level-t"
    realised_nonneg = False

    def __init__(self, nu=3.0, sigma=0.45):
        if nu <= 2:
            raise DegenerateParams("local-level-t: variance normalization requires nu > 2")
        if sigma <= 0:
            raise DegenerateParams("local-level-t: sigma must be positive")
        self.nu = float(nu)
        self.sigma = float(sigma)
        self._const = (math.lgamma((self.nu + 1) / 2) - math.lgamma(self.nu / 2)
                       - 0.5 * math.log((self.nu - 2) * math.pi) - math.log(self.sigma))

    def eval1(self, y, a):
        nu, sig = self.nu, self.sigma
        e = (y - a) / sig
        d = nu - 2 + e * e
        f = self._const - (nu + 1) / 2.0 * math.log1p(e * e / (nu - 2))
        score = (nu + 1) * e / (sig * d)
        realised = (nu + 1) * (nu - 2 - e * e) / (sig * sig * d * d)
        expected = nu * (nu + 1) / (sig * sig * (nu - 2) * (nu + 3))
        return f, score, realised, expected

    def _logpdf_np(self, y, alpha):
        nu, sig = self.nu, self.sigma
        e = (y - alpha) / sig
        return self._const - (nu + 1) / 2.0 * np.log1p(e * e / (nu - 2))

    def link(self, a):
        return np.asarray(a, dtype=float)

    def obs_argmax(self, y):
        return float(y)

    def sample(self, alpha, rng):
        alpha = np.asarray(alpha, dtype=float)
        scale = self.sigma * math.sqrt((self.nu - 2) / self.nu)
        return alpha + scale * rng.standard_t(self.nu, size=alpha.shape)

    def hybrid_weight(self):
        return (1.0 + self.nu / 3.0) / (1.0 + 3.0 * self.nu)


class LinearGaussianObservation(ObservationModel):
    """y = d + Z a + eps, eps ~ N(0, H).  Supports any state dimension."""

    id = "linear-gauss"

    def __init__(self, d, Z, H):
        self.d = np.atleast_1d(np.asarray(d, dtype=float))
        self.Z = np.atleast_2d(np.asarray(Z, dtype=float))
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        if self.Z.shape[0] != self.d.size or self.H.shape != (self.d.size, self.d.size):
            raise ValueError("linear-gauss: dimensions of d, Z, H are not conformable")
        try:
            np.linalg.cholesky(self.H)
        except np.linalg.LinAlgError as exc:
            raise DegenerateParams("linear-gauss: H must be positive definite") from exc
        self.obs_dim = self.d.size
        self.state_dim = self.Z.shape[1]
        self._H_inv = np.linalg.inv(self.H)
        self._info = self.Z.T @ self._H_inv @ self.Z
        sign, logdet_h = np.linalg.slogdet(self.H)
        self._const = -0.5 * (self.obs_dim * math.log(2.0 * math.pi) + logdet_h)

    def eval(self, y, a) -> ObsEval:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        v = np.atleast_1d(np.asarray(y, dtype=float)) - self.d - self.Z @ a
        f = self._const - 0.5 * float(v @ self._H_inv @ v)
        score = self.Z.T @ self._H_inv @ v
        return ObsEval(f, score, self._info.copy(), self._info.copy())

    def eval1(self, y, a):
        f, s, r, e = self.eval(y, np.array([a]))
        return f, float(s[0]), float(r[0, 0]), float(e[0, 0])

    def logpdf(self, y, a):
        self.check_support(y)
        a = np.asarray(a, dtype=float)
        if a.ndim <= 1 and a.size == self.state_dim:
            return self.eval(y, a).logpdf
        # vectorized over a grid of scalar states
        if self.state_dim != 1:
            raise ValueError("grid evaluation needs a scalar state")
        v = float(y) - self.d[0] - self.Z[0, 0] * a
        return self._const - 0.5 * v * v * self._H_inv[0, 0]

    def check_support(self, y):
        y = np.asarray(y, dtype=float)
        if y.size != self.obs_dim or not np.all(np.isfinite(y)):
            raise OutOfSupport("linear-gauss: observation has wrong shape or is non-finite")

    def link(self, a):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        out = self.d + self.Z @ a
        return out[0] if out.size == 1 else out

    def obs_argmax(self, y):
        try:
            return np.linalg.solve(self._info, self.Z.T @ self._H_inv
                                   @ (np.atleast_1d(np.asarray(y, dtype=float)) - self.d))
        except np.linalg.LinAlgError:
            return None

    def sample(self, alpha, rng):
        alpha = np.asarray(alpha, dtype=float)
        chol = np.linalg.cholesky(self.H)
        if alpha.ndim <= 1 and self.state_dim > 1:
            alpha = alpha.reshape(1, -1)
        states = np.atleast_2d(alpha.reshape(-1, self.state_dim))
        eps = rng.standard_normal((states.shape[0], self.obs_dim)) @ chol.T
        out = self.d + states @ self.Z.T + eps
        return out[:, 0] if self.obs_dim == 1 else out


_FAMILIES = {
    "poisson": Poisson,
    "negbin": NegativeBinomial,
    "exponential": Exponential,
    "gamma": Gamma,
    "weibull": Weibull,
    "sv-gauss": GaussianVolatility,
    "sv-t": StudentTVolatility,
    "dep-gauss": GaussianDependence,
    "dep-t": StudentTDependence,
    "local-level-t": StudentTLocalLevel,
    "linear-gauss": LinearGaussianObservation,
}

MODEL_IDS = tuple(_FAMILIES)


def get_model(model_id, **params) -> ObservationModel:
    """Instantiate a registered observation family by string id."""
    try:
        cls = _FAMILIES[model_id]
    except KeyError:
        raise KeyError(f"unknown observation model {model_id!r}; "
                       f"known ids: {', '.join(MODEL_IDS)}") from None
    return cls(**params)
