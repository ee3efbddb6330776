"""Spatial correlation functions and the precomputed spectral cache.

The decay parameter phi lives on a discrete grid, so every correlation
matrix the sampler can ever need is eigendecomposed once up front and
then shared (read-only) by likelihood evaluation, prediction and WAIC.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.spatial.distance import cdist, pdist

__all__ = [
    "KernelSpec",
    "CacheEntry",
    "CorrelationCache",
    "matern_correlation",
    "se_correlation",
    "effective_range",
    "phi_grid_from_effective_range",
    "build_correlation_cache",
]

# Correlation level at which the spatial dependence is declared negligible.
EFFECTIVE_RANGE_LEVEL = 0.05

_EIG_CLIP = -1e-10


@dataclass(frozen=True)
class KernelSpec:
    """Correlation-function parameters.

    family : "matern" for spatial fields, "squared_exponential" for the
        quantile-level processes (where the decay argument is `lambda`).
    nu : Matern smoothness, fixed by the user.
    phi : Matern decay/range, in the units of the locations.
    lam : rescaling of the squared-exponential kernel.
    """

    family: str = "matern"
    nu: float = 2.0
    phi: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.family not in ("matern", "squared_exponential"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not (self.nu > 0 and self.phi > 0 and self.lam > 0):
            raise ValueError("kernel parameters nu, phi, lam must be positive")


def matern_correlation(d, nu: float, phi: float):
    """Matern correlation at distance ``d``.

    Uses the parametrization with scaled argument sqrt(2 nu) d / phi and the
    modified Bessel function of the second kind; equals 1 exactly at d = 0.
    """
    if not (np.isfinite(nu) and nu > 0) or not (np.isfinite(phi) and phi > 0):
        raise ValueError("nu and phi must be positive finite reals")
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and nonnegative")
    x = np.sqrt(2.0 * nu) * d / phi
    # below ~1e-8 the correlation is 1 to machine precision, and the direct
    # product x**nu * kv(nu, x) can hit 0 * inf
    tiny = x < 1e-8
    xs = np.where(tiny, 1.0, x)
    with np.errstate(invalid="ignore", over="ignore"):
        out = (2.0 ** (1.0 - nu) / special.gamma(nu)) * xs**nu * special.kv(nu, xs)
    out = np.where(tiny, 1.0, out)
    # guard roundoff just above 1 for small distances
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def se_correlation(d, lam: float):
    """exp(-lam^2 * d); note the distance enters linearly."""
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError("lam must be a positive finite real")
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and nonnegative")
    out = np.exp(-(lam**2) * d)
    return out if out.ndim else float(out)


def effective_range(nu: float, phi: float, level: float = EFFECTIVE_RANGE_LEVEL) -> float:
    """Distance at which the Matern correlation decays to ``level``.

    The correlation depends on d only through d/phi, so the root is found by
    bisection once at phi=1 and scaled.
    """
    lo, hi = 1e-12, 1.0
    while matern_correlation(hi, nu, 1.0) > level:
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("failed to bracket the effective range")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if matern_correlation(mid, nu, 1.0) > level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) * phi


def phi_grid_from_effective_range(locations, nu: float, G: int):
    """Equally spaced phi values whose effective ranges span
    [D_max/4, 3 D_max/4], D_max the maximal pairwise distance.

    G = 1 degenerates to the interval midpoint, D_max/2.
    """
    locations = np.asarray(locations, dtype=float)
    if locations.ndim != 2 or locations.shape[0] < 2:
        raise ValueError("need at least two locations")
    if G < 1:
        raise ValueError("G must be a positive integer")
    d_max = float(np.max(pdist(locations)))
    if d_max <= 0.0:
        raise ValueError("all locations coincide; cannot set a phi range")
    r1 = effective_range(nu, 1.0)  # effective range at phi = 1
    if G == 1:
        targets = np.array([0.5 * d_max])
    else:
        targets = np.linspace(0.25 * d_max, 0.75 * d_max, G)
    return targets / r1


@dataclass(frozen=True)
class CacheEntry:
    """Eigendecomposition of one Matern correlation matrix K(phi_g)."""

    phi: float
    eigenvalues: np.ndarray  # (n,), nonnegative, sums to n
    eigenvectors: np.ndarray  # (n, n), orthogonal


@dataclass(frozen=True)
class CorrelationCache:
    """Spectra of K(phi_g) for every phi on the discrete grid.

    Immutable after construction; safe to share across chains/workers.
    """

    locations: np.ndarray
    nu: float
    phi_grid: np.ndarray
    entries: tuple[CacheEntry, ...] = field(repr=False)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def size(self) -> int:
        return len(self.entries)

    def entry(self, g: int) -> CacheEntry:
        return self.entries[g]

    def cross_correlation(self, g: int, s_star) -> np.ndarray:
        """Vector of correlations between a new location and the cached ones."""
        s_star = np.asarray(s_star, dtype=float).reshape(1, -1)
        d = cdist(s_star, self.locations)[0]
        return np.asarray(matern_correlation(d, self.nu, self.phi_grid[g]))


def build_correlation_cache(locations, nu: float, phi_grid) -> CorrelationCache:
    """Eigendecompose K(phi_g) for each grid value.

    Eigenvalues in [-1e-10, 0) are clipped to 0 (rank deficiency from
    duplicate locations is allowed); anything more negative is an error.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    phi_grid = np.asarray(phi_grid, dtype=float)
    if phi_grid.size == 0 or np.any(np.diff(phi_grid) <= 0):
        raise ValueError("phi_grid must be nonempty and strictly increasing")
    dists = cdist(locations, locations)
    entries = []
    for g, phi in enumerate(phi_grid):
        K = np.asarray(matern_correlation(dists, nu, phi))
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, 1.0)
        try:
            lam, V = np.linalg.eigh(K)
        except np.linalg.LinAlgError as err:
            raise np.linalg.LinAlgError(
                f"eigendecomposition failed for phi grid index {g}"
            ) from err
        if np.any(lam < _EIG_CLIP):
            raise np.linalg.LinAlgError(
                f"correlation matrix at phi grid index {g} has eigenvalue "
                f"{lam.min():.3e} below tolerance"
            )
        lam = np.clip(lam, 0.0, None)
        recon = (V * lam) @ V.T
        err = float(np.max(np.abs(recon - K))) if K.size else 0.0
        if err > 1e-8:
            raise np.linalg.LinAlgError(
                f"spectral reconstruction error {err:.2e} at phi grid index {g}"
            )
        entries.append(CacheEntry(phi=float(phi), eigenvalues=lam, eigenvectors=V))
    return CorrelationCache(
        locations=locations, nu=float(nu), phi_grid=phi_grid, entries=tuple(entries)
    )
