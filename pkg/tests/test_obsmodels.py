import math

import numpy as np
import pytest
from scipy import stats

from bellmanfilter.numerics import fd_gradient, fd_hessian
from bellmanfilter.obsmodels import (MODEL_IDS, DegenerateParams,
                                     NotApplicable, OutOfSupport, get_model)

SCALAR_IDS = ["poisson", "negbin", "exponential", "gamma", "weibull",
              "sv-gauss", "sv-t", "local-level-t"]
ALL_IDS = SCALAR_IDS + ["dep-gauss", "dep-t"]


def draw_pair(model, rng, spread=1.2):
    """Random (y, alpha) with y drawn from the family at alpha."""
    alpha = float(rng.normal(0.0, spread))
    y = model.sample(np.array([alpha]), rng)
    y = y[0] if model.obs_dim == 1 else y[0, :]
    return y, alpha


class TestRegistry:
    def test_ids(self):
        assert set(ALL_IDS) <= set(MODEL_IDS)
        assert "linear-gauss" in MODEL_IDS
        with pytest.raises(KeyError):
            get_model("no-such-model")

    def test_degenerate_params(self):
        with pytest.raises(DegenerateParams):
            get_model("sv-t", nu=2.0)
        with pytest.raises(DegenerateParams):
            get_model("negbin", kappa=0.0)
        with pytest.raises(DegenerateParams):
            get_model("local-level-t", nu=3.0, sigma=-1.0)

    def test_out_of_support(self):
        with pytest.raises(OutOfSupport):
            get_model("poisson").eval(2.5, [0.0])
        with pytest.raises(OutOfSupport):
            get_model("gamma").logpdf(-1.0, 0.0)
        with pytest.raises(OutOfSupport):
            get_model("dep-gauss").logpdf([1.0], 0.0)


class TestPrintedValues:
    def test_poisson_at_unit_intensity(self):
        f, s, r, e = get_model("poisson").eval1(3.0, 0.0)
        np.testing.assert_allclose(f, -1.0 - math.log(6.0))
        assert (s, r, e) == (2.0, 1.0, 1.0)

    def test_negbin_values(self):
        f, s, r, e = get_model("negbin", kappa=4.0).eval1(2.0, 0.0)
        np.testing.assert_allclose([s, r, e], [0.8, 0.96, 0.8], rtol=1e-12)

    def test_svt_values(self):
        f, s, r, e = get_model("sv-t", nu=10.0).eval1(0.0, 0.0)
        np.testing.assert_allclose([s, r, e], [-0.5, 0.0, 10.0 / 26.0], rtol=1e-12)

    def test_sv_gauss_score_vanishes_at_fitted_variance(self):
        model = get_model("sv-gauss")
        for alpha in (-1.0, 0.0, 2.0):
            y = math.exp(alpha / 2.0)
            _, s, _, _ = model.eval1(y, alpha)
            assert abs(s) < 1e-14

    def test_links(self):
        assert get_model("dep-gauss").link(0.0) == 0.0
        assert get_model("poisson").link(0.0) == 1.0
        rho = get_model("dep-gauss").link(np.array([1.0, 3.0, 6.0, 12.0]))
        assert np.all(np.diff(rho) > 0) and 0.999 < rho[-1] <= 1.0

    def test_predict_signals(self):
        assert get_model("gamma", kappa=1.5).predict_signal(0.0) == 1.5
        np.testing.assert_allclose(get_model("weibull", kappa=1.2).predict_signal(0.0),
                                   math.gamma(1.0 + 1.0 / 1.2))
        np.testing.assert_allclose(get_model("sv-gauss").predict_signal(2.0),
                                   math.exp(1.0))


class TestDerivativeConsistency:
    @pytest.mark.parametrize("model_id", ALL_IDS)
    def test_score_and_realised_match_fd(self, model_id, rng):
        model = get_model(model_id)
        for _ in range(100):
            y, alpha = draw_pair(model, rng)

            def logpdf(x):
                return model.logpdf(y, float(x[0]))

            f, s, r, e = model.eval1(y, alpha)
            grad = fd_gradient(logpdf, [alpha])[0]
            hess = fd_hessian(logpdf, [alpha])[0, 0]
            assert abs(s - grad) <= 1e-5 * max(1.0, abs(s))
            assert abs(r + hess) <= 1e-4 * max(1.0, abs(r))

    @pytest.mark.parametrize("model_id", ALL_IDS)
    def test_eval_matches_eval1(self, model_id, rng):
        model = get_model(model_id)
        y, alpha = draw_pair(model, rng)
        f, s, r, e = model.eval1(y, alpha)
        ev = model.eval(y, np.array([alpha]))
        np.testing.assert_allclose([ev.logpdf, ev.score[0], ev.realised[0, 0],
                                    ev.expected[0, 0]], [f, s, r, e], rtol=1e-12)


class TestAgainstScipy:
    """Independent closed forms for the log-densities."""

    def test_poisson(self, rng):
        model = get_model("poisson")
        for _ in range(20):
            y, a = draw_pair(model, rng)
            np.testing.assert_allclose(model.logpdf(y, a),
                                       stats.poisson.logpmf(y, math.exp(a)),
                                       rtol=1e-10)

    def test_negbin(self, rng):
        model = get_model("negbin", kappa=4.0)
        for _ in range(20):
            y, a = draw_pair(model, rng)
            lam = math.exp(a)
            ref = stats.nbinom.logpmf(y, 4.0, 4.0 / (4.0 + lam))
            np.testing.assert_allclose(model.logpdf(y, a), ref, rtol=1e-10)

    def test_exponential_gamma_weibull(self, rng):
        for model_id, dist in [("exponential", None), ("gamma", None), ("weibull", None)]:
            model = get_model(model_id)
            for _ in range(20):
                y, a = draw_pair(model, rng)
                scale = math.exp(a)
                if model_id == "exponential":
                    ref = stats.expon.logpdf(y, scale=1.0 / scale)
                elif model_id == "gamma":
                    ref = stats.gamma.logpdf(y, 1.5, scale=scale)
                else:
                    ref = stats.weibull_min.logpdf(y, 1.2, scale=scale)
                np.testing.assert_allclose(model.logpdf(y, a), ref, rtol=1e-10)

    def test_volatility_and_local_level(self, rng):
        svg = get_model("sv-gauss")
        svt = get_model("sv-t", nu=10.0)
        llt = get_model("local-level-t", nu=3.0, sigma=0.45)
        for _ in range(20):
            a = float(rng.normal(0, 1))
            y = float(rng.normal(0, 2))
            np.testing.assert_allclose(
                svg.logpdf(y, a), stats.norm.logpdf(y, scale=math.exp(a / 2)),
                rtol=1e-10)
            # variance-normalized t: textbook scale s with s^2 = sigma^2 (nu-2)/nu
            s = math.exp(a / 2) * math.sqrt(8.0 / 10.0)
            np.testing.assert_allclose(svt.logpdf(y, a),
                                       stats.t.logpdf(y, 10.0, scale=s), rtol=1e-10)
            s = 0.45 * math.sqrt(1.0 / 3.0)
            np.testing.assert_allclose(llt.logpdf(y, a),
                                       stats.t.logpdf(y, 3.0, loc=a, scale=s),
                                       rtol=1e-10)

    def test_dep_gauss(self, rng):
        model = get_model("dep-gauss")
        for _ in range(20):
            y, a = draw_pair(model, rng)
            rho = math.tanh(a / 2)
            cov = [[1.0, rho], [rho, 1.0]]
            ref = stats.multivariate_normal.logpdf(y, mean=[0, 0], cov=cov)
            np.testing.assert_allclose(model.logpdf(y, a), ref, rtol=1e-10)


class TestSamplers:
    def test_poisson_lln(self):
        rng = np.random.default_rng(7)
        y = get_model("poisson").sample(np.zeros(100_000), rng)
        assert abs(y.mean() - 1.0) < 0.01

    def test_sv_gauss_variance(self):
        rng = np.random.default_rng(8)
        y = get_model("sv-gauss").sample(np.zeros(100_000), rng)
        assert abs(y.var() - 1.0) < 0.02

    def test_variance_normalization_of_t_families(self):
        rng = np.random.default_rng(9)
        y = get_model("sv-t", nu=10.0).sample(np.zeros(200_000), rng)
        assert abs(y.var() - 1.0) < 0.02
        y = get_model("local-level-t", nu=5.0, sigma=0.45).sample(np.zeros(200_000), rng)
        assert abs(y.var() - 0.45 ** 2) < 0.01
        y2 = get_model("dep-t", nu=10.0).sample(np.full(200_000, 0.6), rng)
        rho = math.tanh(0.3)
        got = np.corrcoef(y2[:, 0], y2[:, 1])[0, 1]
        assert abs(got - rho) < 0.02
        assert abs(y2[:, 0].var() - 1.0) < 0.02

    def test_determinism(self):
        model = get_model("negbin")
        a = np.linspace(-1, 1, 50)
        y1 = model.sample(a, np.random.default_rng(11))
        y2 = model.sample(a, np.random.default_rng(11))
        np.testing.assert_array_equal(y1, y2)


class TestMoments:
    """Score is centred and realised information is unbiased for the
    expected information, per family, at several signal levels."""

    @pytest.mark.parametrize("model_id", ALL_IDS)
    def test_score_and_information_moments(self, model_id):
        model = get_model(model_id)
        rng = np.random.default_rng(hash(model_id) % 2 ** 31)
        n = 60_000
        for alpha in (-0.7, 0.4):
            ys = model.sample(np.full(n, alpha), rng)
            scores = np.empty(n)
            realised = np.empty(n)
            expected = None
            for i in range(n):
                y = ys[i] if model.obs_dim == 1 else ys[i, :]
                _, s, r, e = model.eval1(y, alpha)
                scores[i] = s
                realised[i] = r
                expected = e
            se_s = scores.std() / math.sqrt(n)
            se_r = realised.std() / math.sqrt(n)
            assert abs(scores.mean()) < 3 * se_s + 1e-12, model_id
            assert abs(realised.mean() - expected) < 3 * se_r + 1e-12, model_id


class TestHybridWeights:
    def test_values(self):
        assert get_model("dep-gauss").hybrid_weight() == 0.5
        np.testing.assert_allclose(get_model("dep-t", nu=10.0).hybrid_weight(),
                                   0.538462, rtol=1e-5)
        np.testing.assert_allclose(get_model("local-level-t", nu=3.0).hybrid_weight(),
                                   0.2, rtol=1e-12)

    def test_not_applicable(self):
        with pytest.raises(NotApplicable):
            get_model("poisson").hybrid_weight()

    @pytest.mark.parametrize("model_id", ["dep-gauss", "dep-t", "local-level-t"])
    def test_weighted_information_gain_nonnegative(self, model_id):
        model = get_model(model_id)
        w = model.hybrid_weight()
        rng = np.random.default_rng(13)
        n = 100_000
        for alpha in (-1.0, 0.0, 1.5):
            ys = model.sample(np.full(n, alpha), rng)
            worst = np.inf
            for i in range(n):
                y = ys[i] if model.obs_dim == 1 else ys[i, :]
                _, s, r, e = model.eval1(y, alpha)
                worst = min(worst, w * e + (1 - w) * r)
            assert worst >= -1e-12, (model_id, alpha, worst)

    def test_realised_nonneg_flags(self):
        for model_id in SCALAR_IDS[:7]:
            assert get_model(model_id).realised_nonneg
        for model_id in ("dep-gauss", "dep-t", "local-level-t"):
            assert not get_model(model_id).realised_nonneg
