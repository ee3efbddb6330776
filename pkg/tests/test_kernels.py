import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jsqr.kernels import (
    build_correlation_cache,
    effective_range,
    matern_correlation,
    phi_grid_from_effective_range,
    se_correlation,
)

D_GRID = np.arange(0.01, 3.01, 0.01)


class TestMatern:
    def test_unit_at_zero_distance(self):
        for nu, phi in [(0.5, 0.3), (1.5, 1.0), (2.0, 0.25), (3.7, 2.0)]:
            assert matern_correlation(0.0, nu, phi) == 1.0

    def test_nu_half_closed_form(self):
        # exponential kernel exp(-d/phi) is the nu = 1/2 special case
        for phi in (0.1, 0.3, 1.7):
            got = matern_correlation(D_GRID, 0.5, phi)
            assert np.max(np.abs(got - np.exp(-D_GRID / phi))) <= 1e-10

    def test_nu_three_half_closed_form(self):
        for phi in (0.1, 0.3, 1.7):
            x = np.sqrt(3.0) * D_GRID / phi
            got = matern_correlation(D_GRID, 1.5, phi)
            assert np.max(np.abs(got - (1.0 + x) * np.exp(-x))) <= 1e-10

    def test_point_values(self):
        assert matern_correlation(0.3, 0.5, 0.3) == pytest.approx(np.exp(-1.0), abs=1e-12)
        x = np.sqrt(3.0)
        assert matern_correlation(1.0, 1.5, 1.0) == pytest.approx(
            (1.0 + x) * np.exp(-x), abs=1e-12
        )

    def test_monotone_in_distance_and_phi(self):
        for nu in (0.5, 1.0, 2.0, 3.5):
            vals = matern_correlation(D_GRID, nu, 0.4)
            assert np.all(np.diff(vals) <= 1e-15)
        phis = np.linspace(0.05, 2.0, 40)
        for d in (0.1, 0.5, 2.0):
            vals = np.array([matern_correlation(d, 2.0, p) for p in phis])
            assert np.all(np.diff(vals) >= -1e-15)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            matern_correlation(0.5, -1.0, 0.3)
        with pytest.raises(ValueError):
            matern_correlation(0.5, 1.0, 0.0)
        with pytest.raises(ValueError):
            matern_correlation(np.nan, 1.0, 0.3)
        with pytest.raises(ValueError):
            matern_correlation(-0.1, 1.0, 0.3)

    @settings(max_examples=50, deadline=None)
    @given(
        d=st.floats(0.0, 50.0),
        nu=st.floats(0.1, 5.0),
        phi=st.floats(0.01, 10.0),
    )
    def test_bounded(self, d, nu, phi):
        v = matern_correlation(d, nu, phi)
        assert 0.0 <= v <= 1.0


class TestSquaredExponential:
    def test_values(self):
        assert se_correlation(0.0, 2.0) == 1.0
        assert se_correlation(1.0, 1.0) == pytest.approx(np.exp(-1.0), abs=1e-14)
        # distance enters linearly in the written form
        assert se_correlation(0.1, 3.0) == pytest.approx(np.exp(-9.0 * 0.1), abs=1e-14)

    def test_prior_correlation_transform(self):
        # the hyperprior targets exp(-0.01 lam^2); check the identity that
        # pins lam from a target value of that quantity
        target = 0.6
        lam = np.sqrt(-100.0 * np.log(target))
        assert np.exp(-0.01 * lam**2) == pytest.approx(target, abs=1e-12)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            se_correlation(1.0, 0.0)


class TestPhiGrid:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.locs = rng.uniform(size=(40, 2))
        d = np.sqrt(((self.locs[:, None, :] - self.locs[None, :, :]) ** 2).sum(-1))
        self.d_max = d.max()

    def test_effective_range_closed_form_nu_half(self):
        # for nu = 1/2 the 0.05 crossing solves exp(-r/phi) = 0.05
        for phi in (0.2, 0.7):
            assert effective_range(0.5, phi) == pytest.approx(
                -phi * np.log(0.05), rel=1e-8
            )

    def test_grid_spans_quarter_to_three_quarter(self):
        grid = phi_grid_from_effective_range(self.locs, 0.5, 7)
        assert len(grid) == 7
        assert np.all(np.diff(grid) > 0)
        lo = effective_range(0.5, grid[0])
        hi = effective_range(0.5, grid[-1])
        assert lo == pytest.approx(self.d_max / 4.0, rel=1e-6)
        assert hi == pytest.approx(3.0 * self.d_max / 4.0, rel=1e-6)

    def test_single_value_is_midpoint(self):
        grid = phi_grid_from_effective_range(self.locs, 2.0, 1)
        assert effective_range(2.0, grid[0]) == pytest.approx(self.d_max / 2.0, rel=1e-6)

    def test_ten_values_increasing_generic_nu(self):
        grid = phi_grid_from_effective_range(self.locs, 2.0, 10)
        assert len(grid) == 10 and np.all(np.diff(grid) > 0)

    def test_coincident_locations_rejected(self):
        with pytest.raises(ValueError):
            phi_grid_from_effective_range(np.zeros((5, 2)), 2.0, 3)


class TestCorrelationCache:
    def test_single_location(self):
        cache = build_correlation_cache(np.zeros((1, 2)), 2.0, [0.1, 0.2])
        for g in range(2):
            assert np.allclose(cache.entry(g).eigenvalues, [1.0])

    def test_duplicate_locations_rank_one(self):
        cache = build_correlation_cache(np.zeros((2, 2)), 2.0, [0.3])
        lam = np.sort(cache.entry(0).eigenvalues)
        assert np.allclose(lam, [0.0, 2.0], atol=1e-12)

    def test_spectral_shift_identity(self):
        rng = np.random.default_rng(1)
        locs = rng.uniform(size=(5, 2))
        cache = build_correlation_cache(locs, 2.0, [0.2])
        entry = cache.entry(0)
        alpha = 0.63
        R = alpha * (entry.eigenvectors * entry.eigenvalues) @ entry.eigenvectors.T \
            + (1 - alpha) * np.eye(5)
        shifted = (entry.eigenvectors * (alpha * entry.eigenvalues + 1 - alpha)) \
            @ entry.eigenvectors.T
        assert np.max(np.abs(R - shifted)) <= 1e-12

    def test_entries_wellformed(self):
        rng = np.random.default_rng(2)
        locs = rng.uniform(size=(25, 2))
        grid = phi_grid_from_effective_range(locs, 2.0, 5)
        cache = build_correlation_cache(locs, 2.0, grid)
        d = np.sqrt(((locs[:, None, :] - locs[None, :, :]) ** 2).sum(-1))
        for g in range(cache.size):
            entry = cache.entry(g)
            K = np.asarray(matern_correlation(d, 2.0, grid[g]))
            np.fill_diagonal(K, 1.0)
            V, lam = entry.eigenvectors, entry.eigenvalues
            assert np.all(lam >= 0.0)
            assert np.sum(lam) == pytest.approx(25.0, abs=1e-8)
            assert np.max(np.abs(V @ V.T - np.eye(25))) <= 1e-10
            assert np.max(np.abs((V * lam) @ V.T - K)) <= 1e-8

    def test_rejects_bad_grid(self):
        locs = np.random.default_rng(3).uniform(size=(4, 2))
        with pytest.raises(ValueError):
            build_correlation_cache(locs, 2.0, [0.3, 0.2])
        with pytest.raises(ValueError):
            build_correlation_cache(locs, 2.0, [])
