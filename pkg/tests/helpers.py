"""Shared test utilities: oracle constructions and tiny dataset builders."""

import numpy as np
from scipy.special import ndtri

from jsqr.curves import TAU_GRID, CoefficientCurves, StudentTBase
from jsqr.kernels import build_correlation_cache, matern_correlation
from jsqr.likelihood import Dataset


def normal_affine_curves(gamma0, gamma, sigma) -> CoefficientCurves:
    """Curves of the affine-normal restriction: beta0 = gamma0 + sigma * Phi^-1,
    constant slopes.  Grid nodes are exact; tails use a near-normal base."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    z = ndtri(TAU_GRID)
    phi_pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    L, p = TAU_GRID.shape[0], gamma.shape[0]
    return CoefficientCurves(
        tau_grid=TAU_GRID,
        beta0=gamma0 + sigma * z,
        beta=np.tile(gamma, (L, 1)),
        dbeta0=sigma / phi_pdf,
        dbeta=np.zeros((L, p)),
        base=StudentTBase(200.0),
    )


def dense_R(locs, nu, phi, alpha):
    d = np.sqrt(((locs[:, None, :] - locs[None, :, :]) ** 2).sum(-1))
    K = np.asarray(matern_correlation(d, nu, phi))
    np.fill_diagonal(K, 1.0)
    return alpha * K + (1.0 - alpha) * np.eye(len(locs))


def make_dataset(n=8, p=1, seed=0, y_scale=1.0):
    rng = np.random.default_rng(seed)
    locs = rng.uniform(size=(n, 2))
    x = rng.uniform(-1, 1, size=(n, p))
    y = y_scale * rng.normal(size=n)
    return Dataset.from_raw(y, x, locs), locs


def cache_for(locs, nu=2.0, phi=(0.1, 0.2, 0.35)):
    return build_correlation_cache(locs, nu, np.asarray(phi, dtype=float))


def synthetic_draws(curve_param_list, cop_param_list, u_list, phi_grid,
                    nu=2.0, copula_family="gaussian", base_family="logistic",
                    base_dof=None):
    """Assemble a PosteriorDraws container from explicit parameter draws."""
    from jsqr.mcmc import PosteriorDraws

    T = len(curve_param_list)
    p = curve_param_list[0].p
    m = curve_param_list[0].omega0.shape[0]
    n = len(u_list[0])
    return PosteriorDraws(
        gamma0=np.array([cp.gamma0 for cp in curve_param_list]),
        gamma=np.stack([cp.gamma for cp in curve_param_list]),
        sigma_s2=np.array([cp.sigma_s2 for cp in curve_param_list]),
        sigma_e2=np.array([cp.sigma_e2 for cp in curve_param_list]),
        omega0=np.stack([cp.omega0 for cp in curve_param_list]),
        omega=np.stack([cp.omega for cp in curve_param_list]),
        kappa2=np.ones((T, p + 1)),
        knot_corr=np.stack([cp.knot_corr for cp in curve_param_list]),
        phi_index=np.array([c.phi_index for c in cop_param_list], dtype=np.int64),
        psi=np.array([np.nan if c.psi is None else c.psi for c in cop_param_list]),
        base_dof=np.full(T, np.nan if base_dof is None else base_dof),
        u=np.stack([np.asarray(u) for u in u_list]),
        loglik=np.zeros(T),
        chain=np.zeros(T, dtype=np.int64),
        knots=curve_param_list[0].knots,
        phi_grid=np.asarray(phi_grid, dtype=float),
        nu=nu,
        copula_family=copula_family,
        base_family=base_family,
    )
