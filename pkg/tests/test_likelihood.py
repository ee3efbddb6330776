import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtr, ndtri

from helpers import cache_for, dense_R, make_dataset, normal_affine_curves
from jsqr.copulas import CopulaParams, LatentField, recover_latents, varphi_posterior
from jsqr.curves import (
    KNOTS,
    LogisticBase,
    QuantileCurveParams,
    StudentTBase,
    build_coefficient_curves,
)
from jsqr.kernels import build_correlation_cache, matern_correlation
from jsqr.likelihood import (
    Dataset,
    log_likelihood,
    log_likelihood_from_curves,
    per_observation_loglik,
)


def flat_params(p=1, gamma0=0.0, gamma=None, sigma2=1.0, alpha=0.5):
    gamma = np.zeros(p) if gamma is None else np.asarray(gamma, dtype=float)
    return QuantileCurveParams(
        gamma0=gamma0, gamma=gamma, sigma_s2=alpha * sigma2,
        sigma_e2=(1 - alpha) * sigma2,
        omega0=np.zeros(len(KNOTS)), omega=np.zeros((p, len(KNOTS))),
    )


class TestDataset:
    def test_rescale_roundtrip(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(3.0, 9.0, size=(40, 2))
        ds = Dataset.from_raw(rng.normal(size=40), x, rng.uniform(size=(40, 2)))
        assert np.all(np.abs(ds.x) <= 1.0 + 1e-12)
        assert ds.x.min() == pytest.approx(-1.0)
        assert ds.x.max() == pytest.approx(1.0)
        xr, clamped = ds.rescale_point(x[3])
        assert np.allclose(xr, ds.x[3])
        assert not clamped

    def test_heldout_clamping(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.0, 1.0, size=(20, 1))
        ds = Dataset.from_raw(rng.normal(size=20), x, rng.uniform(size=(20, 2)))
        test = Dataset.from_raw([0.0], [[2.0]], [[0.5, 0.5]], rescale=ds.rescale)
        assert test.n_clamped == 1
        assert test.x[0, 0] == 1.0

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Dataset.from_raw([np.nan], [[0.0]], [[0.0, 0.0]])

    def test_constant_predictor_maps_to_zero(self):
        ds = Dataset.from_raw([1.0, 2.0], [[3.0], [3.0]], [[0, 0], [1, 1]])
        assert np.all(ds.x == 0.0)


class TestLogLikelihood:
    def test_independence_is_marginal_only(self):
        ds, locs = make_dataset(n=12, seed=2)
        cache = cache_for(locs)
        params = flat_params(alpha=0.5)
        cop0 = CopulaParams(alpha=0.0, phi_index=1, nu=2.0)
        base = LogisticBase()
        ll, u = log_likelihood(ds, params, cop0, base, cache)
        curves = build_coefficient_curves(params, base)
        dens = np.array([curves.density(u[i], ds.x[i]) for i in range(ds.n)])
        assert ll == pytest.approx(-np.sum(np.log(dens)), abs=1e-9)

    def test_single_logistic_median_point(self):
        ds = Dataset.from_raw([0.0], [[0.0]], [[0.2, 0.7]])
        cache = build_correlation_cache(ds.s, 2.0, [0.3])
        params = flat_params()
        cop = CopulaParams(alpha=0.0, phi_index=0, nu=2.0)
        ll, u = log_likelihood(ds, params, cop, LogisticBase(), cache)
        assert u[0] == pytest.approx(0.5, abs=1e-12)
        assert ll == pytest.approx(np.log(0.25), abs=1e-12)

    def test_bsre_equivalence_affine_normal_injection(self):
        # responses at grid-node quantiles isolate the assembly (inversion,
        # density, spectral copula) from grid interpolation error
        rng = np.random.default_rng(3)
        n = 8
        locs = rng.uniform(size=(n, 2))
        cache = cache_for(locs)
        x = rng.uniform(-1, 1, size=(n, 1))
        gamma0, gamma, sigma = 0.4, np.array([1.3]), 0.9
        curves = normal_affine_curves(gamma0, gamma, sigma)
        nodes = rng.choice(np.arange(5, len(curves.tau_grid) - 5), size=n)
        taus = curves.tau_grid[nodes]
        y = gamma0 + gamma[0] * x[:, 0] + sigma * ndtri(taus)
        ds = Dataset.from_raw(y, x, locs, rescale=np.array([[-1.0, 1.0]]))
        for alpha, g in [(0.3, 0), (0.8, 2)]:
            cop = CopulaParams(alpha=alpha, phi_index=g, nu=2.0)
            got, u = log_likelihood_from_curves(ds, curves, cop, cache)
            R = dense_R(locs, 2.0, cache.phi_grid[g], alpha)
            mean = gamma0 + gamma[0] * x[:, 0]
            want = stats.multivariate_normal(mean=mean, cov=sigma**2 * R).logpdf(y)
            assert got == pytest.approx(want, abs=1e-8)
            assert np.max(np.abs(u - taus)) <= 1e-12

    def test_bsre_equivalence_t200_pipeline(self):
        # full pipeline with the dof-200 base: the normal-limit gap of the
        # base distribution dominates; agreement is at the few-per-mille level
        rng = np.random.default_rng(4)
        n = 6
        locs = rng.uniform(size=(n, 2))
        cache = cache_for(locs)
        x = rng.uniform(-1, 1, size=(n, 1))
        sigma2 = 0.8
        params = flat_params(gamma0=0.2, gamma=[0.7], sigma2=sigma2, alpha=0.6)
        z0 = rng.uniform(-1.2, 1.2, size=n)
        y = 0.2 + 0.7 * x[:, 0] + np.sqrt(sigma2) * z0
        ds = Dataset.from_raw(y, x, locs, rescale=np.array([[-1.0, 1.0]]))
        cop = CopulaParams(alpha=0.6, phi_index=1, nu=2.0)
        got, _ = log_likelihood(ds, params, cop, StudentTBase(200.0), cache)
        R = dense_R(locs, 2.0, cache.phi_grid[1], 0.6)
        mean = 0.2 + 0.7 * x[:, 0]
        want = stats.multivariate_normal(mean=mean, cov=sigma2 * R).logpdf(y)
        assert got == pytest.approx(want, abs=0.02 * n)

    def test_permutation_invariance(self):
        ds, locs = make_dataset(n=10, seed=5)
        cache = cache_for(locs)
        params = flat_params(alpha=0.5)
        cop = CopulaParams(alpha=0.7, phi_index=2, nu=2.0)
        ll, _ = log_likelihood(ds, params, cop, LogisticBase(), cache)
        perm = np.random.default_rng(6).permutation(10)
        ds2 = Dataset.from_raw(ds.y[perm], ds.x_raw[perm], ds.s[perm],
                               rescale=ds.rescale)
        cache2 = cache_for(locs[perm])
        ll2, _ = log_likelihood(ds2, params, cop, LogisticBase(), cache2)
        assert ll == pytest.approx(ll2, abs=1e-8)

    def test_copula_only_update_consistency(self):
        # recomputing from scratch equals reusing cached u after a change
        # that touches only the dependence parameters
        ds, locs = make_dataset(n=15, seed=7)
        cache = cache_for(locs)
        params = flat_params(alpha=0.4)
        base = LogisticBase()
        cop1 = CopulaParams(alpha=0.4, phi_index=0, nu=2.0)
        ll1, u1 = log_likelihood(ds, params, cop1, base, cache)
        from jsqr.copulas import gaussian_copula_logdensity

        cop2 = CopulaParams(alpha=0.4, phi_index=2, nu=2.0)
        ll2_scratch, u2 = log_likelihood(ds, params, cop2, base, cache)
        incremental = (
            ll1
            - gaussian_copula_logdensity(u1, 0.4, cache.entry(0))
            + gaussian_copula_logdensity(u1, 0.4, cache.entry(2))
        )
        assert np.array_equal(u1, u2)
        assert ll2_scratch == pytest.approx(incremental, abs=1e-10)

    def test_far_observation_near_independence(self):
        rng = np.random.default_rng(8)
        n = 9
        locs = rng.uniform(size=(n, 2))
        far = np.vstack([locs, [200.0, 200.0]])
        phi = 0.2
        cache_n = build_correlation_cache(locs, 2.0, [phi])
        cache_f = build_correlation_cache(far, 2.0, [phi])
        u = rng.uniform(0.1, 0.9, n)
        u_far = np.append(u, 0.77)
        from jsqr.copulas import gaussian_copula_logdensity

        a = gaussian_copula_logdensity(u, 0.8, cache_n.entry(0))
        b = gaussian_copula_logdensity(u_far, 0.8, cache_f.entry(0))
        assert abs(b - a) <= 1e-6

    def test_underflow_sentinel(self):
        # an extreme level-compression ramp drives the quantile density
        # below the floor in the squeezed region; the sentinel is -inf,
        # not an exception
        m = len(KNOTS)
        params = QuantileCurveParams(
            gamma0=0.0, gamma=np.zeros(1), sigma_s2=0.5, sigma_e2=0.5,
            omega0=np.linspace(0.0, 760.0, m), omega=np.zeros((1, m)),
        )
        base = LogisticBase()
        curves = build_coefficient_curves(params, base)
        y_low = curves.value(0.005, [0.0])
        ds = Dataset.from_raw([y_low], [[0.0]], [[0.5, 0.5]])
        cache = build_correlation_cache(ds.s, 2.0, [0.3])
        cop = CopulaParams(alpha=0.0, phi_index=0, nu=2.0)
        ll, u = log_likelihood(ds, params, cop, base, cache)
        assert ll == -np.inf


class TestPerObservationLoglik:
    def test_independent_limit(self):
        ds, locs = make_dataset(n=10, seed=9)
        cache = cache_for(locs)
        params = flat_params(alpha=1e-9)
        base = LogisticBase()
        cop_eps = CopulaParams(alpha=1e-9, phi_index=0, nu=2.0)
        ll, u = log_likelihood(ds, params, cop_eps, base, cache)
        z = ndtri(u)
        latents = LatentField(z=z, w=np.zeros(ds.n), v=ndtr(z / np.sqrt(1 - 1e-9)))
        terms = per_observation_loglik(ds, params, cop_eps, latents, base)
        assert np.sum(terms) == pytest.approx(ll, abs=1e-5)

    def test_single_obs_correction_value(self):
        # w = 0, alpha = 1/2, v = 1/2: the level-map derivative is sqrt(1/2)
        ds = Dataset.from_raw([0.0], [[0.0]], [[0.5, 0.5]])
        params = flat_params()
        base = LogisticBase()
        cop = CopulaParams(alpha=0.5, phi_index=0, nu=2.0)
        latents = LatentField(z=np.array([0.0]), w=np.array([0.0]), v=np.array([0.5]))
        terms = per_observation_loglik(ds, params, cop, latents, base)
        # marginal term log(1/4) plus +0.5 log 2 from the map derivative
        assert terms[0] == pytest.approx(np.log(0.25) + 0.5 * np.log(2.0), abs=1e-9)

    @pytest.mark.parametrize("family", ["gaussian", "student_t"])
    def test_change_of_variables_identity(self, family):
        # sum of conditional terms + latent prior - latent posterior equals
        # the marginal likelihood, for any latent draw
        rng = np.random.default_rng(10)
        n = 3
        locs = rng.uniform(size=(n, 2))
        cache = cache_for(locs, phi=(0.25,))
        x = rng.uniform(-1, 1, size=(n, 1))
        y = rng.normal(size=n)
        ds = Dataset.from_raw(y, x, locs, rescale=np.array([[-1.0, 1.0]]))
        params = flat_params(alpha=0.6)
        base = LogisticBase()
        psi = 4.0 if family == "student_t" else None
        cop = CopulaParams(alpha=0.6, phi_index=0, nu=2.0, psi=psi)
        ll, u = log_likelihood(ds, params, cop, base, cache)
        entry = cache.entry(0)
        z = ndtri(u) if psi is None else stats.t.ppf(u, psi)
        K = (entry.eigenvectors * entry.eigenvalues) @ entry.eigenvectors.T
        for _ in range(3):
            lat = recover_latents(z, cop, entry, rng)
            terms = per_observation_loglik(ds, params, cop, lat, base)
            from jsqr.copulas import latent_posterior_moments

            mean, V, var_eig = latent_posterior_moments(z, 0.6, entry)
            if psi is None:
                prior_w = stats.multivariate_normal(cov=0.6 * K).logpdf(lat.w)
                post_w = stats.multivariate_normal(
                    mean=mean, cov=(V * var_eig) @ V.T
                ).logpdf(lat.w)
                total = np.sum(terms) + prior_w - post_w
            else:
                shape, rate = varphi_posterior(z, 0.6, psi, entry)
                prior_w = stats.multivariate_normal(
                    cov=0.6 * K / lat.varphi
                ).logpdf(lat.w)
                prior_phi = stats.gamma(a=psi / 2, scale=2.0 / psi).logpdf(lat.varphi)
                post_w = stats.multivariate_normal(
                    mean=mean, cov=(V * var_eig) @ V.T / lat.varphi
                ).logpdf(lat.w)
                post_phi = stats.gamma(a=shape, scale=1.0 / rate).logpdf(lat.varphi)
                total = np.sum(terms) + prior_w + prior_phi - post_w - post_phi
            assert total == pytest.approx(ll, abs=1e-6)
