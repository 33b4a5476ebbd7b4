import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from lmoamp.prior import (
    BayesDenoiser,
    BgPrior,
    LinearDenoiser,
    bg_error_covariance,
    bg_mmse,
    bg_posterior_covariance,
    bg_posterior_mean,
    bg_posterior_mean_derivative,
    bg_posterior_variance,
    consistent_cov_estimate,
    consistent_cov_terms,
    evaluate_denoiser,
)


def posterior_mean_quad(s, v, rho):
    """E[x | s] by integrating the Gaussian component; the spike contributes 0."""
    lam = 1.0 / rho
    lik = lambda x: stats.norm.pdf(s, loc=x, scale=np.sqrt(v))
    slab = lambda x: rho * stats.norm.pdf(x, scale=np.sqrt(lam)) * lik(x)
    lim = abs(s) + 12 * np.sqrt(lam + v)
    num, _ = integrate.quad(lambda x: x * slab(x), -lim, lim, epsabs=0, epsrel=1e-13, limit=400)
    den, _ = integrate.quad(slab, -lim, lim, epsabs=0, epsrel=1e-13, limit=400)
    den += (1 - rho) * stats.norm.pdf(s, scale=np.sqrt(v))
    return num / den


def mmse_quad(v, rho):
    """E[Var(x | s)] with s integrated per mixture component by adaptive quadrature."""
    prior = BgPrior(rho)
    total = 0.0
    for weight, var in prior.components():
        sd = np.sqrt(var + v)
        f = lambda s: stats.norm.pdf(s, scale=sd) * bg_posterior_variance(s, v, prior)
        tr, w = prior.transition_point(v), 10 * np.sqrt(v)
        edges = np.unique(np.clip([-12 * sd, -tr - w, -tr + w, 0.0, tr - w, tr + w, 12 * sd],
                                  -12 * sd, 12 * sd))
        for lo, hi in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=500)
            total += weight * val
    return total


class TestBgPrior:
    def test_unit_second_moment(self):
        for rho in (0.01, 0.1, 0.5, 1.0):
            assert BgPrior(rho).second_moment == pytest.approx(1.0, rel=1e-15)

    @pytest.mark.parametrize("rho", [0.0, -0.1, 1.5])
    def test_rejects_bad_density(self, rho):
        with pytest.raises(ValueError):
            BgPrior(rho)

    def test_sample_rho_one_is_standard_gaussian(self):
        x = BgPrior(1.0).sample(np.random.default_rng(0), 200_000)
        assert np.all(x != 0)
        assert abs(x.mean()) < 4 / np.sqrt(x.size)
        assert abs(x.var() - 1.0) < 4 * np.sqrt(2 / x.size)

    def test_sample_sparsity(self):
        x = BgPrior(0.1).sample(np.random.default_rng(1), 100_000)
        frac = np.mean(x != 0)
        assert abs(frac - 0.1) < 4 * np.sqrt(0.09 / x.size)


class TestPosteriorMean:
    def test_zero_at_origin(self):
        for rho in (0.05, 0.3, 1.0):
            assert bg_posterior_mean(0.0, 0.4, BgPrior(rho)) == 0.0

    def test_gaussian_prior_linear(self):
        s = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(bg_posterior_mean(s, 0.3, BgPrior(1.0)), s / 1.3, rtol=1e-15)

    def test_matches_quadrature(self):
        value = bg_posterior_mean(1.0, 0.1, BgPrior(0.1))
        assert value == pytest.approx(posterior_mean_quad(1.0, 0.1, 0.1), abs=1e-8)

    @given(s=st.floats(-8, 8), v=st.floats(1e-3, 10), rho=st.floats(0.01, 0.99))
    @settings(max_examples=60, deadline=None)
    def test_odd_and_shrinking(self, s, v, rho):
        prior = BgPrior(rho)
        f = bg_posterior_mean(s, v, prior)
        assert bg_posterior_mean(-s, v, prior) == pytest.approx(-f, abs=1e-15)
        assert abs(f) <= abs(s) / (1 + rho * v) + 1e-12

    def test_no_overflow_far_tail(self):
        prior = BgPrior(1e-3)
        s = np.array([-1e4, -50.0, 50.0, 1e4])
        f = bg_posterior_mean(s, 1e-4, prior)
        assert np.all(np.isfinite(f))
        np.testing.assert_allclose(f, s * (1 / prior.rho) / (1 / prior.rho + 1e-4), rtol=1e-12)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            bg_posterior_mean(1.0, 0.0, BgPrior(0.1))
        with pytest.raises(ValueError):
            bg_posterior_mean_derivative(1.0, -1.0, BgPrior(0.1))


class TestDerivative:
    def test_gaussian_prior_constant(self):
        s = np.linspace(-4, 4, 9)
        np.testing.assert_allclose(bg_posterior_mean_derivative(s, 0.25, BgPrior(1.0)), 1 / 1.25)

    @pytest.mark.parametrize("s", [-2.0, 0.0, 3.0])
    def test_central_difference(self, s):
        prior, v, h = BgPrior(0.1), 0.2, 1e-5
        fd = (bg_posterior_mean(s + h, v, prior) - bg_posterior_mean(s - h, v, prior)) / (2 * h)
        assert abs(bg_posterior_mean_derivative(s, v, prior) - fd) < 1e-6

    def test_asymptotic_slope(self):
        prior, v = BgPrior(0.1), 0.2
        slope = 1 / (1 + prior.rho * v)
        for s in (-50.0, 50.0):
            assert bg_posterior_mean_derivative(s, v, prior) == pytest.approx(slope, rel=1e-12)

    def test_posterior_variance_identity(self):
        # f'(s) = Var(x | s) / v for the Gaussian-noise posterior mean
        prior, v = BgPrior(0.2), 0.35
        s = np.linspace(-6, 6, 41)
        np.testing.assert_allclose(bg_posterior_mean_derivative(s, v, prior),
                                   bg_posterior_variance(s, v, prior) / v, rtol=1e-12)


class TestMmse:
    def test_gaussian_closed_form(self):
        for v in (1e-4, 0.1, 1.0, 30.0):
            assert bg_mmse(v, BgPrior(1.0)) == pytest.approx(v / (1 + v), rel=1e-14)

    @pytest.mark.parametrize("v", [1e-5, 1e-3, 0.05, 1.0, 20.0])
    @pytest.mark.parametrize("rho", [0.05, 0.1, 0.5])
    def test_matches_adaptive_quadrature(self, v, rho):
        assert bg_mmse(v, BgPrior(rho)) == pytest.approx(mmse_quad(v, rho), rel=1e-9)

    def test_limits(self):
        prior = BgPrior(0.1)
        assert bg_mmse(1e-9, prior) < 1e-8
        assert bg_mmse(1e6, prior) == pytest.approx(1.0, abs=1e-5)

    def test_increasing_and_below_linear_estimator(self):
        # not concave for sparse priors, so only monotonicity and the LMMSE bound
        prior = BgPrior(0.1)
        v = np.logspace(-6, 3, 200)
        m = np.array([bg_mmse(x, prior) for x in v])
        assert np.all(np.diff(m) > 0)
        assert np.all(m < v / (1 + v))

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(2)
        prior, v = BgPrior(0.1), 0.05
        x = prior.sample(rng, 10**6)
        s = x + np.sqrt(v) * rng.standard_normal(x.size)
        err = (bg_posterior_mean(s, v, prior) - x) ** 2
        assert abs(err.mean() - bg_mmse(v, prior)) < 3 * err.std() / np.sqrt(x.size)


class TestPosteriorCovariance:
    @staticmethod
    def conditional_oracle(sp, s, V, rho):
        """E[(x - f_a(s'))(x - f_b(s)) | s', s] by quadrature over x."""
        prior = BgPrior(rho)
        fa = bg_posterior_mean(sp, V[0, 0], prior)
        fb = bg_posterior_mean(s, V[1, 1], prior)
        lik = lambda x: stats.multivariate_normal.pdf([sp - x, s - x], cov=V)
        slab = lambda x: rho * stats.norm.pdf(x, scale=np.sqrt(1 / rho)) * lik(x)
        num, _ = integrate.quad(lambda x: (x - fa) * (x - fb) * slab(x), -15, 15,
                                epsabs=0, epsrel=1e-12, limit=400)
        den, _ = integrate.quad(slab, -15, 15, epsabs=0, epsrel=1e-12, limit=400)
        spike = (1 - rho) * lik(0.0)
        return (num + spike * fa * fb) / (den + spike)

    @pytest.mark.parametrize("sp,s", [(0.3, 0.5), (1.5, 1.2), (-2.0, 0.4)])
    def test_diag_dominant_matches_quadrature(self, sp, s):
        V = np.array([[0.3, 0.05], [0.05, 0.2]])
        value = bg_posterior_covariance(sp, s, V, BgPrior(0.1))
        assert value == pytest.approx(self.conditional_oracle(sp, s, V, 0.1), abs=1e-6)

    def test_nested_reduces_to_later_posterior_variance(self):
        prior = BgPrior(0.1)
        V = np.array([[0.4, 0.1], [0.1, 0.1]])
        sp, s = np.array([0.2, -1.0, 2.5]), np.array([0.1, -0.7, 2.0])
        np.testing.assert_allclose(bg_posterior_covariance(sp, s, V, prior),
                                   bg_posterior_variance(s, 0.1, prior), rtol=1e-14)

    def test_duplicate_measurement(self):
        prior = BgPrior(0.1)
        V = np.full((2, 2), 0.3)
        s = np.linspace(-3, 3, 7)
        np.testing.assert_allclose(bg_posterior_covariance(s, s, V, prior),
                                   bg_posterior_variance(s, 0.3, prior), rtol=1e-14)

    def test_rejects_singular_non_nested(self):
        # s - x = 2 (s' - x): rank one but neither observation is the finer one
        V = np.array([[0.2, 0.4], [0.4, 0.8]])
        with pytest.raises(ValueError):
            bg_posterior_covariance(0.1, 0.2, V, BgPrior(0.1))

    def test_error_covariance_matches_dblquad(self):
        prior = BgPrior(0.1)
        a, b, c = 0.4, 0.25, 0.1
        V = np.array([[a, c], [c, b]])
        total = 0.0
        for weight, var in prior.components():
            cov = V + var
            pdf = stats.multivariate_normal(cov=cov).pdf
            f = lambda s, sp: pdf([sp, s]) * bg_posterior_covariance(sp, s, V, prior)
            L = 12 * np.sqrt(cov.max())
            val, _ = integrate.dblquad(f, -L, L, -L, L, epsabs=1e-13, epsrel=1e-11)
            total += weight * val
        assert bg_error_covariance(a, b, c, prior) == pytest.approx(total, rel=1e-8)

    def test_error_covariance_nested_cases(self):
        prior = BgPrior(0.1)
        assert bg_error_covariance(0.5, 0.2, 0.2, prior) == pytest.approx(bg_mmse(0.2, prior), rel=1e-14)
        assert bg_error_covariance(0.2, 0.5, 0.2, prior) == pytest.approx(bg_mmse(0.2, prior), rel=1e-14)

    def test_error_covariance_small_variance_monte_carlo(self):
        rng = np.random.default_rng(3)
        prior = BgPrior(0.1)
        a, b, c = 0.01, 0.008, 0.007
        n = 10**6
        x = prior.sample(rng, n)
        L = np.linalg.cholesky(np.array([[a, c], [c, b]]))
        z = L @ rng.standard_normal((2, n))
        prod = (bg_posterior_mean(x + z[0], a, prior) - x) * (bg_posterior_mean(x + z[1], b, prior) - x)
        se = prod.std() / np.sqrt(n)
        assert abs(prod.mean() - bg_error_covariance(a, b, c, prior)) < 3 * se


class TestDenoiserEval:
    def test_xi_b_identity(self):
        rng = np.random.default_rng(4)
        prior, v = BgPrior(0.1), 0.02
        x = prior.sample(rng, 10**6)
        s = x + np.sqrt(v) * rng.standard_normal(x.size)
        d = bg_posterior_mean_derivative(s, v, prior)
        assert abs(d.mean() - bg_mmse(v, prior) / v) < 3 * d.std() / np.sqrt(x.size)

    def test_derivative_avg_in_unit_interval(self):
        rng = np.random.default_rng(5)
        for rho in (0.05, 0.5, 1.0):
            prior = BgPrior(rho)
            s = prior.sample(rng, 5000) + 0.3 * rng.standard_normal(5000)
            ev = evaluate_denoiser(s, 0.09, prior)
            assert 0 < ev.derivative_avg < 1
            assert ev.mean.shape == s.shape

    def test_bayes_denoiser_wraps_functions(self):
        prior = BgPrior(0.2)
        den = BayesDenoiser(prior, 0.3)
        s = np.linspace(-2, 2, 5)
        np.testing.assert_array_equal(den(s), bg_posterior_mean(s, 0.3, prior))
        np.testing.assert_array_equal(den.derivative(s), bg_posterior_mean_derivative(s, 0.3, prior))


class TestConsistentEstimator:
    @staticmethod
    def draw(rng, prior, n, V):
        x = prior.sample(rng, n)
        z = np.linalg.cholesky(V) @ rng.standard_normal((2, n))
        return x, x + z[0], x + z[1]

    @pytest.mark.parametrize("setting", [
        ("identity", np.array([[0.5, 0.0], [0.0, 0.3]])),
        ("bayes", np.array([[0.2, 0.05], [0.05, 0.1]])),
        ("mixed", np.array([[0.3, 0.2], [0.2, 0.25]])),
    ])
    def test_matches_error_product(self, setting):
        name, V = setting
        rng = np.random.default_rng(6)
        prior = BgPrior(0.1)
        x, sp, s = self.draw(rng, prior, 10**6, V)
        if name == "identity":
            fp, ft = LinearDenoiser(1.0), LinearDenoiser(1.0)
        elif name == "bayes":
            fp, ft = BayesDenoiser(prior, V[0, 0]), BayesDenoiser(prior, V[1, 1])
        else:
            fp, ft = LinearDenoiser(0.5), BayesDenoiser(prior, V[1, 1])
        terms = consistent_cov_terms(sp, s, V[0, 1], fp, ft)
        direct = (x - fp(sp)) * (x - ft(s))
        se = np.hypot(terms.std(), direct.std()) / np.sqrt(x.size)
        assert abs(terms.mean() - direct.mean()) < 3 * se

    def test_zero_denoiser_drops_terms(self):
        rng = np.random.default_rng(7)
        prior = BgPrior(0.1)
        V = np.array([[0.3, 0.1], [0.1, 0.2]])
        x, sp, s = self.draw(rng, prior, 1000, V)
        ft = BayesDenoiser(prior, 0.2)
        est = consistent_cov_estimate(sp, s, 0.1, LinearDenoiser(0.0), ft)
        # with f' = 0 only the terms involving f survive
        expected = np.mean(1.0 + 0.1 * ft.derivative(s) - sp * ft(s))
        assert est == pytest.approx(expected, rel=1e-14)

    def test_trivial_collapse(self):
        f0 = LinearDenoiser(0.0)
        assert consistent_cov_estimate(np.zeros(1), np.zeros(1), 0.0, f0, f0) == 1.0

    def test_rejects_empty(self):
        f0 = LinearDenoiser(0.0)
        with pytest.raises(ValueError):
            consistent_cov_estimate(np.zeros(0), np.zeros(0), 0.0, f0, f0)
