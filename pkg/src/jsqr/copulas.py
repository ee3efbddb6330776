"""Gaussian and Student-t copula processes on latent quantile levels.

All operations against the n observed locations run through the cached
eigendecomposition of K(phi): the copula correlation alpha*K + (1-alpha)*I
shares eigenvectors with K, with eigenvalues alpha*lam + (1-alpha), so no
factorization happens inside the sampler loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .kernels import CacheEntry, CorrelationCache

__all__ = [
    "CopulaParams",
    "LatentField",
    "gaussian_copula_logdensity",
    "gaussian_copula_logdensity_z",
    "t_copula_logdensity",
    "t_copula_logdensity_z",
    "conditional_quantile_gaussian",
    "conditional_quantile_t",
    "gaussian_conditional_moments",
    "latent_posterior_moments",
    "varphi_posterior",
    "recover_latents",
    "h_map",
    "z_from_u",
]

_LOG2PI = np.log(2.0 * np.pi)

PSI_MIN, PSI_MAX = 2.0, 20.0


def _norm_logpdf(z):
    return -0.5 * (z * z + _LOG2PI)


def _t_logpdf(z, psi: float):
    return (
        special.gammaln(0.5 * (psi + 1.0))
        - special.gammaln(0.5 * psi)
        - 0.5 * np.log(psi * np.pi)
        - 0.5 * (psi + 1.0) * np.log1p(z * z / psi)
    )


@dataclass
class CopulaParams:
    """Dependence parameters: spatially structured share alpha, decay-grid
    index, fixed smoothness nu, and t-copula dof psi (None for Gaussian)."""

    alpha: float
    phi_index: int
    nu: float
    psi: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.psi is not None and not (PSI_MIN < self.psi < PSI_MAX):
            raise ValueError(f"psi must lie in ({PSI_MIN}, {PSI_MAX})")

    @property
    def family(self) -> str:
        return "gaussian" if self.psi is None else "student_t"


@dataclass
class LatentField:
    """Recovered latent decomposition of the dependence field.

    z are the Gaussian/t scores of the latent levels, w the spatial process
    values, v the pure-error quantile levels, varphi the gamma mixing
    variable (t copula only).
    """

    z: np.ndarray
    w: np.ndarray
    v: np.ndarray
    varphi: float | None = None


def _check_u(u):
    u = np.asarray(u, dtype=float)
    if u.size and (np.any(u <= 0.0) or np.any(u >= 1.0)):
        raise ValueError("latent quantile levels must lie strictly inside (0, 1)")
    return u


def z_from_u(u, psi: float | None = None):
    """Gaussian or t scores of latent levels."""
    u = _check_u(u)
    if psi is None:
        return special.ndtri(u)
    return special.stdtrit(psi, u)


def _shifted_eigvals(entry: CacheEntry, alpha: float):
    m = alpha * entry.eigenvalues + (1.0 - alpha)
    if np.any(m <= 1e-14):
        raise np.linalg.LinAlgError(
            "alpha*K + (1-alpha)*I is singular; alpha = 1 with duplicated "
            "locations is not supported"
        )
    return m


def gaussian_copula_logdensity_z(z, alpha: float, entry: CacheEntry) -> float:
    """Gaussian copula log density from precomputed scores z = ndtri(u)."""
    z = np.asarray(z, dtype=float)
    if z.size <= 1 or alpha == 0.0:
        return 0.0
    m = _shifted_eigvals(entry, alpha)
    t = entry.eigenvectors.T @ z
    t2 = t * t
    return float(-0.5 * np.sum(np.log(m)) - 0.5 * (np.sum(t2 / m) - np.sum(t2)))


def t_copula_logdensity_z(z, alpha: float, psi: float, entry: CacheEntry) -> float:
    """t copula log density from precomputed scores z = stdtrit(psi, u)."""
    z = np.asarray(z, dtype=float)
    n = z.size
    if n <= 1:
        return 0.0
    m = _shifted_eigvals(entry, alpha)
    t = entry.eigenvectors.T @ z
    quad = np.sum(t * t / m)
    log_mvt = (
        special.gammaln(0.5 * (psi + n))
        - special.gammaln(0.5 * psi)
        - 0.5 * n * np.log(psi * np.pi)
        - 0.5 * np.sum(np.log(m))
        - 0.5 * (psi + n) * np.log1p(quad / psi)
    )
    return float(log_mvt - np.sum(_t_logpdf(z, psi)))


def gaussian_copula_logdensity(u, alpha: float, entry: CacheEntry) -> float:
    """Log density of the Gaussian copula with correlation alpha*K + (1-alpha)*I."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    u = _check_u(u)
    if u.size <= 1 or alpha == 0.0:
        return 0.0
    return gaussian_copula_logdensity_z(special.ndtri(u), alpha, entry)


def t_copula_logdensity(u, alpha: float, psi: float, entry: CacheEntry) -> float:
    """Log density of the t copula: multivariate-t log pdf of the scores
    minus the univariate t log pdfs."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not PSI_MIN < psi < PSI_MAX:
        raise ValueError(f"psi must lie in ({PSI_MIN}, {PSI_MAX})")
    u = _check_u(u)
    if u.size <= 1:
        return 0.0
    return t_copula_logdensity_z(special.stdtrit(psi, u), alpha, psi, entry)


def gaussian_conditional_moments(z, alpha: float, entry: CacheEntry, kstar):
    """Kriging mean and variance of the score at a new location.

    mu = alpha k*' R^-1 z, s2 = 1 - alpha^2 k*' R^-1 k*; tiny negative
    variances (>= -1e-10) are clamped to zero, larger ones are an error.
    """
    m = _shifted_eigvals(entry, alpha)
    a = entry.eigenvectors.T @ np.asarray(kstar, dtype=float)
    b = entry.eigenvectors.T @ np.asarray(z, dtype=float)
    mu = alpha * np.sum(a * b / m)
    s2 = 1.0 - alpha**2 * np.sum(a * a / m)
    if s2 < -1e-10:
        raise np.linalg.LinAlgError(f"negative predictive variance {s2:.3e}")
    return float(mu), float(max(s2, 0.0))


def conditional_quantile_gaussian(tau_star, u, s_star, params: CopulaParams, cache: CorrelationCache):
    """Quantile level(s) of the conditional copula at a new location."""
    u = _check_u(u)
    tau_star = np.asarray(tau_star, dtype=float)
    if u.size == 0 or params.alpha == 0.0:
        return tau_star if tau_star.ndim else float(tau_star)
    entry = cache.entry(params.phi_index)
    kstar = cache.cross_correlation(params.phi_index, s_star)
    z = special.ndtri(u)
    mu, s2 = gaussian_conditional_moments(z, params.alpha, entry, kstar)
    out = special.ndtr(mu + np.sqrt(s2) * special.ndtri(tau_star))
    return out if out.ndim else float(out)


def conditional_quantile_t(tau_star, u, s_star, params: CopulaParams, cache: CorrelationCache):
    """Same as the Gaussian variant, through the conditional t distribution
    with dof psi + n and rescaled spread."""
    if params.psi is None:
        raise ValueError("t-copula conditional quantile needs psi")
    psi = params.psi
    u = _check_u(u)
    tau_star = np.asarray(tau_star, dtype=float)
    n = u.size
    if n == 0:
        return tau_star if tau_star.ndim else float(tau_star)
    entry = cache.entry(params.phi_index)
    kstar = cache.cross_correlation(params.phi_index, s_star)
    z = special.stdtrit(psi, u)
    m = _shifted_eigvals(entry, params.alpha)
    b = entry.eigenvectors.T @ z
    d = np.sum(b * b / m)
    mu, s2 = gaussian_conditional_moments(z, params.alpha, entry, kstar)
    spread = np.sqrt((psi + d) / (psi + n)) * np.sqrt(s2)
    out = special.stdtr(psi, mu + spread * special.stdtrit(psi + n, tau_star))
    return out if out.ndim else float(out)


def latent_posterior_moments(z, alpha: float, entry: CacheEntry):
    """Posterior of the spatial process W given scores z (Gaussian case):
    mean vector, eigenvectors and per-eigendirection variances."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("latent recovery needs alpha strictly inside (0, 1)")
    lam = entry.eigenvalues
    V = entry.eigenvectors
    m = alpha * lam + (1.0 - alpha)
    b = V.T @ np.asarray(z, dtype=float)
    mean = V @ (alpha * lam / m * b)
    var_eig = alpha * lam * (1.0 - alpha) / m
    return mean, V, var_eig


def varphi_posterior(z, alpha: float, psi: float, entry: CacheEntry):
    """Gamma(shape, rate) posterior of the mixing variable (t copula)."""
    m = _shifted_eigvals(entry, alpha)
    b = entry.eigenvectors.T @ np.asarray(z, dtype=float)
    d = np.sum(b * b / m)
    n = len(np.atleast_1d(z))
    return 0.5 * (psi + n), 0.5 * (psi + d)


def recover_latents(z, params: CopulaParams, entry: CacheEntry, rng: np.random.Generator) -> LatentField:
    """Draw the latent decomposition (W, V, and varphi for the t copula)
    from its conditional posterior given the scores z."""
    z = np.asarray(z, dtype=float)
    alpha = params.alpha
    mean, V, var_eig = latent_posterior_moments(z, alpha, entry)
    eps = rng.standard_normal(z.shape[0])
    if params.psi is None:
        w = mean + V @ (np.sqrt(var_eig) * eps)
        v = special.ndtr((z - w) / np.sqrt(1.0 - alpha))
        return LatentField(z=z, w=w, v=v)
    shape, rate = varphi_posterior(z, alpha, params.psi, entry)
    varphi = rng.gamma(shape, 1.0 / rate)
    w = mean + V @ (np.sqrt(var_eig / varphi) * eps)
    v = special.ndtr(np.sqrt(varphi / (1.0 - alpha)) * (z - w))
    return LatentField(z=z, w=w, v=v, varphi=float(varphi))


def h_map(w, alpha: float, t, varphi: float | None = None, psi: float | None = None):
    """Latent-conditional quantile-level map and its t-derivative.

    Gaussian: h = Phi(w + sqrt(1-alpha) Phi^-1(t)).  t copula, given the
    mixing variable: h = T_psi(w + sqrt((1-alpha)/varphi) Phi^-1(t)).
    Both are increasing diffeomorphisms of (0,1) for alpha < 1.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("h map requires alpha in [0, 1)")
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise ValueError("t must lie strictly inside (0, 1)")
    zt = special.ndtri(t)
    if varphi is None:
        c = np.sqrt(1.0 - alpha)
        zin = w + c * zt
        h = special.ndtr(zin)
        dh = c * np.exp(_norm_logpdf(zin) - _norm_logpdf(zt))
    else:
        if psi is None:
            raise ValueError("t-copula h map needs psi")
        c = np.sqrt((1.0 - alpha) / varphi)
        zin = w + c * zt
        h = special.stdtr(psi, zin)
        dh = c * np.exp(_t_logpdf(zin, psi) - _norm_logpdf(zt))
    if np.ndim(h):
        return h, dh
    return float(h), float(dh)
