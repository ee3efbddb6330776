import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtri

from jsqr.curves import (
    KNOTS,
    TAU_GRID,
    ZETA_GRID,
    LogisticBase,
    QuantileCurveParams,
    StudentTBase,
    build_coefficient_curves,
    gp_interpolate,
    invert_quantile,
    projection_radius,
    quantile_density,
    quantile_value,
    zeta_transform,
)


def flat_params(p=1, gamma0=0.0, gamma=None, sigma2=1.0, m=11):
    gamma = np.zeros(p) if gamma is None else np.asarray(gamma, dtype=float)
    return QuantileCurveParams(
        gamma0=gamma0, gamma=gamma, sigma_s2=sigma2 / 2, sigma_e2=sigma2 / 2,
        omega0=np.zeros(m), omega=np.zeros((p, m)),
    )


def random_params(rng, p=1, scale=0.8):
    m = KNOTS.shape[0]
    s2 = float(np.exp(rng.normal(scale=0.7)))
    a = float(rng.uniform(0.05, 0.95))
    return QuantileCurveParams(
        gamma0=float(rng.normal()),
        gamma=rng.normal(size=p),
        sigma_s2=a * s2,
        sigma_e2=(1 - a) * s2,
        omega0=rng.normal(scale=scale, size=m),
        omega=rng.normal(scale=scale, size=(p, m)),
        knot_corr=rng.uniform(0.2, 0.9, size=p + 1),
    )


class TestBaseDistributions:
    @pytest.mark.parametrize("base", [LogisticBase(), StudentTBase(4.0), StudentTBase(30.0)])
    def test_cdf_quantile_roundtrip(self, base):
        u = np.linspace(0.001, 0.999, 101)
        assert np.max(np.abs(base.cdf(base.quantile(u)) - u)) <= 1e-12
        assert base.tau0 == 0.5
        assert np.all(base.quantile_density(u) > 0)

    def test_logistic_forms(self):
        base = LogisticBase()
        assert base.pdf(0.0) == pytest.approx(0.25)
        assert base.quantile_density(0.5) == pytest.approx(4.0)
        z = np.linspace(-20, 20, 41)
        rel = np.abs(base.quantile_density(base.cdf(z)) * base.pdf(z) - 1.0)
        assert np.max(rel) <= 1e-7

    def test_t_dof_validation(self):
        with pytest.raises(ValueError):
            StudentTBase(-1.0)


class TestZetaTransform:
    def test_constant_gives_identity(self):
        zeta, dzeta = zeta_transform(ZETA_GRID, np.zeros_like(ZETA_GRID))
        assert np.max(np.abs(zeta - ZETA_GRID)) <= 1e-15
        assert np.allclose(dzeta, 1.0)

    def test_normalization_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            om = rng.normal(scale=2.0, size=ZETA_GRID.shape[0])
            zeta, _ = zeta_transform(ZETA_GRID, om)
            assert zeta[0] == 0.0
            assert zeta[-1] == 1.0
            assert np.all(np.diff(zeta) > 0)

    def test_linear_integrand_closed_form(self):
        # int_0^t e^u du / (e - 1); trapezoid on the default grid is ~1e-8
        zeta, _ = zeta_transform(ZETA_GRID, ZETA_GRID.copy())
        i = int(np.argmin(np.abs(ZETA_GRID - 0.5)))
        exact = (np.exp(0.5) - 1.0) / (np.e - 1.0)
        assert zeta[i] == pytest.approx(exact, abs=1e-7)
        # and to 1e-8 on a fine quadrature grid
        fine = np.linspace(0.0, 1.0, 10001)
        zf, _ = zeta_transform(fine, fine.copy())
        assert zf[5000] == pytest.approx(exact, abs=1e-10)

    def test_overflow_guarded(self):
        zeta, dzeta = zeta_transform(ZETA_GRID, 800.0 * ZETA_GRID)
        assert np.all(np.isfinite(zeta)) and np.all(np.isfinite(dzeta))

    def test_rejects_nonfinite(self):
        bad = np.zeros_like(ZETA_GRID)
        bad[3] = np.inf
        with pytest.raises(ValueError):
            zeta_transform(ZETA_GRID, bad)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=5, max_size=5))
    def test_diffeomorphism_property(self, vals):
        om = np.interp(ZETA_GRID, np.linspace(0, 1, 5), vals)
        zeta, dzeta = zeta_transform(ZETA_GRID, om)
        assert zeta[0] == 0.0 and zeta[-1] == 1.0
        assert np.all(np.diff(zeta) > 0)
        assert np.all(dzeta > 0)


class TestProjectionRadius:
    def test_zero_vector_convention(self):
        assert projection_radius(np.zeros(3)) == 1.0

    def test_univariate(self):
        for b in (-2.0, 0.3, 5.0):
            assert projection_radius([b]) == pytest.approx(1.0)

    def test_two_dim(self):
        assert projection_radius([1.0, 1.0]) == pytest.approx(np.sqrt(2.0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=7))
    def test_matches_vertex_enumeration(self, b):
        b = np.asarray(b)
        if np.linalg.norm(b) < 1e-6:
            return
        # sup over the hypercube is attained at a vertex: -x'b = sum |b_j|
        assert projection_radius(b) == pytest.approx(
            np.sum(np.abs(b)) / np.linalg.norm(b), rel=1e-12
        )


class TestGpInterpolate:
    def test_passes_through_knots(self):
        rng = np.random.default_rng(4)
        vals = rng.normal(size=KNOTS.shape[0])
        out = gp_interpolate(KNOTS, vals, lam2=30.0, queries=KNOTS)
        assert np.max(np.abs(out - vals)) <= 1e-6

    def test_matrix_values(self):
        rng = np.random.default_rng(5)
        vals = rng.normal(size=(3, KNOTS.shape[0]))
        out = gp_interpolate(KNOTS, vals, lam2=10.0, queries=np.array([0.3, 0.7]))
        assert out.shape == (2, 3)


class TestCoefficientCurves:
    def test_flat_logistic_slope_constant(self):
        params = flat_params(p=2, gamma=[1.5, -0.3])
        curves = build_coefficient_curves(params, LogisticBase())
        assert np.max(np.abs(curves.beta - np.array([1.5, -0.3])[None, :])) <= 1e-14
        assert np.all(curves.dbeta == 0.0)

    def test_flat_logistic_intercept_closed_form(self):
        params = flat_params(sigma2=1.0)
        curves = build_coefficient_curves(params, LogisticBase())
        closed = np.log(TAU_GRID) - np.log1p(-TAU_GRID)
        body = (TAU_GRID >= 0.2) & (TAU_GRID <= 0.8)
        assert np.max(np.abs(curves.beta0[body] - closed[body])) <= 5e-4
        wide = (TAU_GRID >= 0.05) & (TAU_GRID <= 0.95)
        assert np.max(np.abs(curves.beta0[wide] - closed[wide])) <= 5e-3

    def test_anchored_at_tau0(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            params = random_params(rng, p=2)
            curves = build_coefficient_curves(params, LogisticBase())
            i = int(np.argmin(np.abs(TAU_GRID - 0.5)))
            assert curves.beta0[i] == pytest.approx(params.gamma0, abs=1e-12)
            assert np.allclose(curves.beta[i], params.gamma, atol=1e-12)

    def test_positive_shape_function_gives_increasing_slope(self):
        params = QuantileCurveParams(
            gamma0=0.0, gamma=np.zeros(1), sigma_s2=0.5, sigma_e2=0.5,
            omega0=np.zeros(11), omega=np.full((1, 11), 2.0),
        )
        curves = build_coefficient_curves(params, LogisticBase())
        assert np.all(np.diff(curves.beta[:, 0]) > 0)

    def test_noncrossing_slack_by_construction(self):
        rng = np.random.default_rng(7)
        for p in (1, 3, 7):
            for _ in range(20):
                params = random_params(rng, p=p, scale=1.5)
                curves = build_coefficient_curves(params, LogisticBase())
                slack = curves.dbeta0 - np.sum(np.abs(curves.dbeta), axis=1)
                assert np.all(slack > 0)

    def test_bsre_reduction_central_band(self):
        # with a near-normal base and flat shape functions the intercept
        # reduces to the normal-quantile line; the dof-200 approximation
        # bounds the achievable agreement to the central band
        params = flat_params(sigma2=1.0)
        curves = build_coefficient_curves(params, StudentTBase(200.0))
        band = (TAU_GRID >= 0.3) & (TAU_GRID <= 0.7)
        assert np.max(np.abs(curves.beta0[band] - ndtri(TAU_GRID[band]))) <= 1e-3
        wide = (TAU_GRID >= 0.05) & (TAU_GRID <= 0.95)
        assert np.max(np.abs(curves.beta0[wide] - ndtri(TAU_GRID[wide]))) <= 1e-2

    def test_quadrature_derivative_consistency(self):
        params = flat_params(sigma2=2.0)
        curves = build_coefficient_curves(params, LogisticBase())
        h = np.diff(TAU_GRID)
        fd = np.diff(curves.beta0) / h
        mids = TAU_GRID[:-1] + h / 2
        dmid = np.interp(mids, TAU_GRID, curves.dbeta0)
        body = (mids > 0.01) & (mids < 0.99)
        rel = np.abs(fd - dmid) / dmid
        assert np.max(rel[body]) <= 1e-3


class TestQuantileEvaluation:
    def setup_method(self):
        self.curves = build_coefficient_curves(flat_params(), LogisticBase())

    def test_symmetric_median(self):
        assert quantile_value(self.curves, 0.5, [0.3]) == 0.0

    def test_monotone_in_tau(self):
        taus = np.linspace(0.01, 0.99, 99)
        vals = quantile_value(self.curves, taus, [0.7])
        assert np.all(np.diff(vals) > 0)

    def test_density_positive_and_matches_interp(self):
        taus = np.linspace(0.02, 0.98, 49)
        d = quantile_density(self.curves, taus, [0.7])
        assert np.all(d > 0)
        assert quantile_density(self.curves, 0.5, [0.0]) == pytest.approx(4.0, rel=1e-12)

    def test_domain_check(self):
        with pytest.raises(ValueError):
            quantile_value(self.curves, 0.5, [1.5])
        with pytest.raises(ValueError):
            quantile_value(self.curves, 1.2, [0.0])

    def test_tail_extension_monotone_and_continuous(self):
        left = quantile_value(self.curves, np.array([1e-6, 5e-4, 1e-3]), [0.4])
        right = quantile_value(self.curves, np.array([0.999, 0.9995, 1 - 1e-6]), [0.4])
        assert np.all(np.diff(left) > 0) and np.all(np.diff(right) > 0)
        eps = 1e-6
        a = quantile_value(self.curves, 0.999 - eps, [0.4])
        b = quantile_value(self.curves, 0.999 + eps, [0.4])
        # the curve is steep near the boundary; the gap must be slope-sized
        slope = quantile_density(self.curves, 0.999, [0.4])
        assert abs(a - b) <= 4.0 * eps * slope


class TestInversion:
    def test_median_inverse(self):
        curves = build_coefficient_curves(flat_params(), LogisticBase())
        assert invert_quantile(curves, 0.0, [0.0]) == pytest.approx(0.5, abs=1e-12)

    def test_roundtrip(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            params = random_params(rng, p=2)
            curves = build_coefficient_curves(params, LogisticBase())
            x = rng.uniform(-1, 1, size=2)
            taus = np.arange(0.05, 0.951, 0.05)
            y = quantile_value(curves, taus, x)
            back = invert_quantile(curves, y, x)
            assert np.max(np.abs(back - taus)) <= 1e-8

    def test_residual_bound_random_probes(self):
        rng = np.random.default_rng(9)
        params = random_params(rng, p=1)
        curves = build_coefficient_curves(params, LogisticBase())
        x = np.array([0.3])
        y = rng.uniform(-8, 8, size=10_000)
        u = invert_quantile(curves, y, x)
        interior = (u > 1e-9) & (u < 1 - 1e-9)
        resid = np.abs(quantile_value(curves, u[interior], x) - y[interior])
        assert np.max(resid / (1.0 + np.abs(y[interior]))) <= 1e-10

    def test_rejects_nonfinite(self):
        curves = build_coefficient_curves(flat_params(), LogisticBase())
        with pytest.raises(ValueError):
            invert_quantile(curves, np.nan, [0.0])

    def test_extreme_values_clamped(self):
        curves = build_coefficient_curves(flat_params(), LogisticBase())
        assert invert_quantile(curves, 1e6, [0.0]) <= 1.0 - 1e-13
        assert invert_quantile(curves, -1e6, [0.0]) >= 1e-13


class TestMonotonicityProperty:
    def test_thousand_random_draws(self):
        rng = np.random.default_rng(10)
        taus = TAU_GRID
        for _ in range(1000):
            p = int(rng.integers(1, 4))
            params = random_params(rng, p=p)
            curves = build_coefficient_curves(params, LogisticBase())
            x = rng.uniform(-1, 1, size=p)
            q = curves.beta0 + curves.beta @ x
            assert np.all(np.diff(q) > 0), "quantile curve must increase on the grid"
