"""Joint log-likelihood assembly.

The joint density factors into the product of marginal quantile-model
densities and the copula density of the latent levels u_i = tau_{x_i}(y_i).
Marginal-parameter moves recompute the u vector; copula-parameter moves
reuse it (and the scores z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import copulas
from .copulas import CopulaParams, LatentField, h_map
from .curves import BaseDistribution, QuantileCurveParams, build_coefficient_curves
from .kernels import CorrelationCache

__all__ = [
    "Dataset",
    "log_likelihood",
    "log_likelihood_from_curves",
    "per_observation_loglik",
]

_DENSITY_FLOOR = 1e-300


@dataclass
class Dataset:
    """Point-referenced regression data.

    Predictors are stored raw and affinely rescaled to [-1, 1]^p using
    per-column (min, max); held-out data reuse the training record (values
    beyond it are clamped, with the count kept in `n_clamped`).
    """

    y: np.ndarray
    x_raw: np.ndarray
    x: np.ndarray
    s: np.ndarray
    rescale: np.ndarray  # (p, 2) min/max per predictor
    n_clamped: int = 0

    @classmethod
    def from_raw(cls, y, x, s, rescale=None) -> "Dataset":
        y = np.asarray(y, dtype=float).reshape(-1)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] != y.shape[0] and x.shape[1] == y.shape[0]:
            x = x.T
        s = np.atleast_2d(np.asarray(s, dtype=float))
        n = y.shape[0]
        if x.shape[0] != n or s.shape[0] != n:
            raise ValueError("y, x, s must have matching row counts")
        for name, arr in (("y", y), ("x", x), ("s", s)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        if rescale is None:
            if n == 0:
                raise ValueError("cannot infer a rescale record from empty data")
            rescale = np.stack([x.min(axis=0), x.max(axis=0)], axis=1)
        rescale = np.asarray(rescale, dtype=float)
        lo, hi = rescale[:, 0], rescale[:, 1]
        span = hi - lo
        ok = span > 0
        xr = np.zeros_like(x)
        xr[:, ok] = 2.0 * (x[:, ok] - lo[ok]) / span[ok] - 1.0
        clipped = np.clip(xr, -1.0, 1.0)
        n_clamped = int(np.sum(np.abs(xr - clipped) > 1e-12))
        return cls(y=y, x_raw=x, x=clipped, s=s, rescale=rescale, n_clamped=n_clamped)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def rescale_point(self, x_star):
        """Map a raw predictor vector into [-1,1]^p; returns (x, was_clamped)."""
        x_star = np.asarray(x_star, dtype=float).reshape(-1)
        lo, hi = self.rescale[:, 0], self.rescale[:, 1]
        span = hi - lo
        out = np.zeros_like(x_star)
        ok = span > 0
        out[ok] = 2.0 * (x_star[ok] - lo[ok]) / span[ok] - 1.0
        clipped = np.clip(out, -1.0, 1.0)
        return clipped, bool(np.any(np.abs(out - clipped) > 1e-12))


def _copula_term(u, params: CopulaParams, cache: CorrelationCache) -> float:
    entry = cache.entry(params.phi_index)
    if params.psi is None:
        return copulas.gaussian_copula_logdensity(u, params.alpha, entry)
    return copulas.t_copula_logdensity(u, params.alpha, params.psi, entry)


def log_likelihood_from_curves(
    dataset: Dataset,
    curves,
    copula_params: CopulaParams,
    cache: CorrelationCache,
):
    """Joint log-likelihood against already-built coefficient curves."""
    if dataset.n == 0:
        return 0.0, np.empty(0)
    Q, D = curves.row_tables(dataset.x)
    u = curves.invert_rows(Q, D, dataset.y)
    dens = curves.density_rows(D, u)
    if not np.all(np.isfinite(dens)) or np.any(dens < _DENSITY_FLOOR):
        return -np.inf, u
    marg = -float(np.sum(np.log(dens)))
    return marg + _copula_term(u, copula_params, cache), u


def log_likelihood(
    dataset: Dataset,
    curve_params: QuantileCurveParams,
    copula_params: CopulaParams,
    base: BaseDistribution,
    cache: CorrelationCache,
):
    """Joint log-likelihood and the latent level vector u.

    Returns (-inf, u) when any quantile density falls below the underflow
    floor, so Metropolis proposals into invalid regions reject cleanly.
    """
    curves = build_coefficient_curves(curve_params, base)
    return log_likelihood_from_curves(dataset, curves, copula_params, cache)


def per_observation_loglik(
    dataset: Dataset,
    curve_params: QuantileCurveParams,
    copula_params: CopulaParams,
    latents: LatentField,
    base: BaseDistribution,
) -> np.ndarray:
    """Conditional log-likelihood terms given parameters and latents.

    Observations are independent given (W, varphi): each term is the
    marginal quantile-model log density at u_i plus the log derivative
    correction of the latent-conditional level map at (w_i, v_i).
    """
    curves = build_coefficient_curves(curve_params, base)
    if copula_params.psi is None:
        u = np.asarray(special.ndtr(latents.z))
    else:
        u = np.asarray(special.stdtr(copula_params.psi, latents.z))
    u = np.clip(u, 1e-15, 1.0 - 1e-15)
    _, D = curves.row_tables(dataset.x)
    dens = curves.density_rows(D, u)
    _, dh = h_map(
        latents.w, copula_params.alpha, np.clip(latents.v, 1e-15, 1 - 1e-15),
        varphi=latents.varphi, psi=copula_params.psi,
    )
    return -np.log(dens) - np.log(dh)
