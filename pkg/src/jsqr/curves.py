"""Non-crossing marginal quantile curves.

The conditional quantile model Q(tau | x) = beta0(tau) + x'beta(tau) is
parametrized so that monotonicity in tau holds by construction for every x
in the rescaled predictor hypercube [-1, 1]^p:

    beta0' (tau) = sigma * q0(zeta(tau)) * zeta'(tau)
    beta'  (tau) = beta0'(tau) * w / (a(w) * sqrt(1 + |w|^2)),  w = omega(zeta(tau))

with q0 the quantile density of a fixed base distribution, zeta a monotone
bijection of [0,1] driven by an unconstrained function omega0, and a(w) the
projection radius of the hypercube.  omega0 and omega are represented by
their values on a small knot grid and kriged onto a fine quantile-level grid.

Curves are integrated by the trapezoid rule on the fine grid; beyond its
ends the quantile function continues along the base distribution's tail.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "BaseDistribution",
    "LogisticBase",
    "StudentTBase",
    "make_base",
    "QuantileCurveParams",
    "CoefficientCurves",
    "TAU_GRID",
    "ZETA_GRID",
    "KNOTS",
    "default_knots",
    "zeta_transform",
    "projection_radius",
    "gp_interpolate",
    "build_coefficient_curves",
    "quantile_value",
    "quantile_density",
    "invert_quantile",
]

_TAIL_CLAMP = 1e-12


def _make_tau_grid() -> np.ndarray:
    body = np.arange(1, 100) / 100.0  # 0.01 ... 0.99
    grid = np.concatenate([[0.001, 0.005], body, [0.995, 0.999]])
    return grid


#: fine quantile-level grid for curve storage (interior of (0,1))
TAU_GRID = _make_tau_grid()
#: quadrature grid for the zeta normalization (includes the endpoints)
ZETA_GRID = np.concatenate([[0.0], TAU_GRID, [1.0]])

_TAU0_IDX = int(np.argmin(np.abs(TAU_GRID - 0.5)))
assert TAU_GRID[_TAU0_IDX] == 0.5


def default_knots(m: int = 11) -> np.ndarray:
    """Equally spaced interior knots on [0.04, 0.96]."""
    return np.linspace(0.04, 0.96, m)


KNOTS = default_knots()


# ---------------------------------------------------------------------------
# base distributions
# ---------------------------------------------------------------------------


class BaseDistribution:
    """Reference distribution supplying the quantile-density shape.

    Subclasses expose pdf/cdf/quantile/quantile_density; tau0 = cdf(0).
    """

    name = "base"
    tau0 = 0.5

    def pdf(self, z):  # pragma: no cover - interface
        raise NotImplementedError

    def cdf(self, z):
        raise NotImplementedError

    def quantile(self, u):
        raise NotImplementedError

    def quantile_density(self, u):
        """Derivative of the quantile function, 1 / pdf(quantile(u))."""
        return 1.0 / self.pdf(self.quantile(u))

    def variance(self) -> float:
        raise NotImplementedError


class LogisticBase(BaseDistribution):
    name = "logistic"

    def pdf(self, z):
        z = np.asarray(z, dtype=float)
        out = 0.25 / np.cosh(0.5 * z) ** 2
        return out if out.ndim else float(out)

    def cdf(self, z):
        out = special.expit(np.asarray(z, dtype=float))
        return out if out.ndim else float(out)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        out = np.log(u) - np.log1p(-u)
        return out if out.ndim else float(out)

    def quantile_density(self, u):
        u = np.asarray(u, dtype=float)
        out = 1.0 / (u * (1.0 - u))
        return out if out.ndim else float(out)

    def variance(self) -> float:
        return np.pi**2 / 3.0


class StudentTBase(BaseDistribution):
    """Student-t base; dof may be learned from data."""

    name = "student_t"

    def __init__(self, dof: float):
        if not (np.isfinite(dof) and dof > 0):
            raise ValueError("dof must be a positive real")
        self.dof = float(dof)

    def pdf(self, z):
        z = np.asarray(z, dtype=float)
        v = self.dof
        logc = special.gammaln(0.5 * (v + 1)) - special.gammaln(0.5 * v) - 0.5 * np.log(v * np.pi)
        out = np.exp(logc - 0.5 * (v + 1) * np.log1p(z * z / v))
        return out if out.ndim else float(out)

    def cdf(self, z):
        out = special.stdtr(self.dof, np.asarray(z, dtype=float))
        return out if out.ndim else float(out)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        z = special.stdtrit(self.dof, u)
        # one Newton step tightens the cdf-quantile roundtrip to ~1e-16
        z = z - (special.stdtr(self.dof, z) - u) / self.pdf(z)
        return z if z.ndim else float(z)

    def variance(self) -> float:
        return self.dof / (self.dof - 2.0) if self.dof > 2.0 else np.inf


def make_base(family: str, dof: float | None = None) -> BaseDistribution:
    if family == "logistic":
        return LogisticBase()
    if family == "student_t":
        return StudentTBase(dof if dof is not None else 10.0)
    raise ValueError(f"unknown base family {family!r}")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def zeta_transform(tau_grid, omega0):
    """Monotone bijection of [0,1] from an unconstrained function.

    zeta(tau) = int_0^tau exp(omega0) / int_0^1 exp(omega0), trapezoid rule on
    tau_grid (which must include both endpoints).  Returns (zeta, dzeta).
    """
    tau_grid = np.asarray(tau_grid, dtype=float)
    omega0 = np.asarray(omega0, dtype=float)
    if not np.all(np.isfinite(omega0)):
        raise ValueError("omega0 values must be finite")
    w = np.exp(omega0 - omega0.max())
    dt = np.diff(tau_grid)
    increments = 0.5 * (w[1:] + w[:-1]) * dt
    ct = np.concatenate([[0.0], np.cumsum(increments)])
    total = ct[-1]
    zeta = ct / total
    zeta[-1] = 1.0
    dzeta = w / total
    return zeta, dzeta


def projection_radius(b) -> float:
    """sup_{x in [-1,1]^p} (-x'b) / |b|_2 = |b|_1 / |b|_2; equals 1 at b = 0."""
    b = np.asarray(b, dtype=float)
    n2 = np.linalg.norm(b)
    if n2 == 0.0:
        return 1.0
    return float(np.sum(np.abs(b)) / n2)


def gp_interpolate(knots, values, lam2: float, queries, jitter: float = 1e-10):
    """Kriging mean under the exp(-lam2 * |t - t'|) kernel.

    values may be (m,) or (k, m) for k functions sharing the kernel.
    Interpolates exactly through the knot values.
    """
    knots = np.asarray(knots, dtype=float)
    queries = np.asarray(queries, dtype=float)
    values = np.asarray(values, dtype=float)
    R = np.exp(-lam2 * np.abs(knots[:, None] - knots[None, :]))
    R[np.diag_indices_from(R)] += jitter
    cf = cho_factor(R, lower=True)
    r = np.exp(-lam2 * np.abs(queries[:, None] - knots[None, :]))
    sol = cho_solve(cf, values.T if values.ndim == 2 else values)
    return r @ sol  # (q,) or (q, k)


# ---------------------------------------------------------------------------
# parameters and curves
# ---------------------------------------------------------------------------


@dataclass
class QuantileCurveParams:
    """Marginal-model parameters.

    gamma0, gamma anchor the curves at tau0; sigma_s2/sigma_e2 split the
    total scale sigma^2 into spatial and pure-error shares; omega0/omega
    hold the knot values of the unconstrained shape functions; knot_corr
    holds, per function, the interpolation-kernel correlation parameter
    exp(-0.01 lam_j^2) in (0,1) (index 0 refers to omega0).
    """

    gamma0: float
    gamma: np.ndarray
    sigma_s2: float
    sigma_e2: float
    omega0: np.ndarray
    omega: np.ndarray  # (p, m)
    knots: np.ndarray = field(default_factory=lambda: KNOTS.copy())
    knot_corr: np.ndarray | None = None

    def __post_init__(self):
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.omega0 = np.asarray(self.omega0, dtype=float)
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        self.knots = np.asarray(self.knots, dtype=float)
        if self.sigma_s2 < 0 or self.sigma_e2 <= 0:
            raise ValueError("need sigma_s2 >= 0 and sigma_e2 > 0")
        if self.knot_corr is None:
            self.knot_corr = np.full(self.p + 1, 0.6)
        else:
            self.knot_corr = np.asarray(self.knot_corr, dtype=float)

    @property
    def p(self) -> int:
        return self.gamma.shape[0]

    @property
    def sigma2(self) -> float:
        return self.sigma_s2 + self.sigma_e2

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))

    @property
    def alpha(self) -> float:
        return self.sigma_s2 / self.sigma2


@dataclass
class CoefficientCurves:
    """Coefficient curves tabulated on the fine grid, with tail extensions.

    Immutable in practice: construct once, evaluate concurrently.
    """

    tau_grid: np.ndarray
    beta0: np.ndarray  # (L,)
    beta: np.ndarray  # (L, p)
    dbeta0: np.ndarray  # (L,)
    dbeta: np.ndarray  # (L, p)
    base: BaseDistribution

    def __post_init__(self):
        t_lo, t_hi = self.tau_grid[0], self.tau_grid[-1]
        self._f0inv_lo = self.base.quantile(t_lo)
        self._f0inv_hi = self.base.quantile(t_hi)
        self._q0_lo = self.base.quantile_density(t_lo)
        self._q0_hi = self.base.quantile_density(t_hi)

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    # -- row tables for vectorized evaluation over a predictor matrix -------

    def row_tables(self, X):
        """(Q, D) tables of shape (n, L): quantile values and densities of
        every row of X on the grid."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Q = self.beta0[None, :] + X @ self.beta.T
        D = self.dbeta0[None, :] + X @ self.dbeta.T
        return Q, D

    def _check_domain(self, X):
        if np.any(np.abs(X) > 1.0 + 1e-9):
            raise ValueError("predictor outside the rescaled domain [-1, 1]^p")

    def invert_rows(self, Q, D, y):
        """Quantile levels u with Q(u | x_i) = y_i, row-wise.

        Exact within grid cells (the interpolant is piecewise linear);
        beyond the grid the base-distribution tail map is inverted.  Levels
        are clamped to [1e-12, 1 - 1e-12].
        """
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ValueError("response values must be finite")
        tg = self.tau_grid
        n, L = Q.shape
        j = np.sum(Q < y[:, None], axis=1)
        u = np.empty(n)
        interior = (j > 0) & (j < L)
        if np.any(interior):
            ji = j[interior]
            q1 = Q[interior, ji - 1]
            q2 = Q[interior, ji]
            t1 = tg[ji - 1]
            t2 = tg[ji]
            gap = q2 - q1
            frac = np.divide(y[interior] - q1, gap, out=np.zeros_like(gap),
                             where=gap > 0.0)
            u[interior] = t1 + frac * (t2 - t1)
        lo = j == 0
        if np.any(lo):
            s = D[lo, 0] / self._q0_lo
            dy = y[lo] - Q[lo, 0]
            step = np.divide(dy, s, out=np.where(dy < 0, -np.inf, 0.0), where=s > 0)
            u[lo] = self.base.cdf(self._f0inv_lo + step)
        hi = j == L
        if np.any(hi):
            s = D[hi, -1] / self._q0_hi
            dy = y[hi] - Q[hi, -1]
            step = np.divide(dy, s, out=np.where(dy > 0, np.inf, 0.0), where=s > 0)
            u[hi] = self.base.cdf(self._f0inv_hi + step)
        return np.clip(u, _TAIL_CLAMP, 1.0 - _TAIL_CLAMP)

    def value_rows(self, Q, D, u):
        """Quantile values at levels u, row-wise against tables (Q, D)."""
        tg = self.tau_grid
        u = np.asarray(u, dtype=float)
        k = np.clip(np.searchsorted(tg, u), 1, len(tg) - 1)
        t1, t2 = tg[k - 1], tg[k]
        w = (u - t1) / (t2 - t1)
        rows = np.arange(Q.shape[0])
        out = (1.0 - w) * Q[rows, k - 1] + w * Q[rows, k]
        lo = u < tg[0]
        if np.any(lo):
            s = D[lo, 0] / self._q0_lo
            out[lo] = Q[lo, 0] + s * (self.base.quantile(u[lo]) - self._f0inv_lo)
        hi = u > tg[-1]
        if np.any(hi):
            s = D[hi, -1] / self._q0_hi
            out[hi] = Q[hi, -1] + s * (self.base.quantile(u[hi]) - self._f0inv_hi)
        return out

    def density_rows(self, D, u):
        """Quantile density dQ/dtau at levels u, row-wise against table D."""
        tg = self.tau_grid
        u = np.asarray(u, dtype=float)
        k = np.clip(np.searchsorted(tg, u), 1, len(tg) - 1)
        t1, t2 = tg[k - 1], tg[k]
        w = (u - t1) / (t2 - t1)
        rows = np.arange(D.shape[0])
        out = (1.0 - w) * D[rows, k - 1] + w * D[rows, k]
        lo = u < tg[0]
        if np.any(lo):
            out[lo] = (D[lo, 0] / self._q0_lo) * self.base.quantile_density(u[lo])
        hi = u > tg[-1]
        if np.any(hi):
            out[hi] = (D[hi, -1] / self._q0_hi) * self.base.quantile_density(u[hi])
        return out

    # -- single-x conveniences ----------------------------------------------

    def value(self, tau, x):
        """Q(tau | x); tau scalar or array in (0,1)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        self._check_domain(x)
        scalar = np.ndim(tau) == 0
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        if np.any(tau <= 0.0) or np.any(tau >= 1.0):
            raise ValueError("tau must lie strictly inside (0, 1)")
        tg = self.tau_grid
        qg = self.beta0 + self.beta @ x
        out = np.interp(tau, tg, qg)
        lo = tau < tg[0]
        hi = tau > tg[-1]
        if np.any(lo) or np.any(hi):
            dg = self.dbeta0 + self.dbeta @ x
            if np.any(lo):
                s = dg[0] / self._q0_lo
                out[lo] = qg[0] + s * (self.base.quantile(tau[lo]) - self._f0inv_lo)
            if np.any(hi):
                s = dg[-1] / self._q0_hi
                out[hi] = qg[-1] + s * (self.base.quantile(tau[hi]) - self._f0inv_hi)
        return float(out[0]) if scalar else out

    def density(self, tau, x):
        """dQ/dtau at (tau, x); strictly positive."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        self._check_domain(x)
        scalar = np.ndim(tau) == 0
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        D = np.tile(self.dbeta0 + self.dbeta @ x, (len(tau), 1))
        out = self.density_rows(D, tau)
        return float(out[0]) if scalar else out

    def invert(self, y, x):
        """tau with Q(tau | x) = y."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        self._check_domain(x)
        scalar = np.ndim(y) == 0
        y = np.atleast_1d(np.asarray(y, dtype=float))
        Q, D = self.row_tables(np.tile(x, (len(y), 1)))
        u = self.invert_rows(Q, D, y)
        return float(u[0]) if scalar else u


def build_coefficient_curves(
    params: QuantileCurveParams, base: BaseDistribution
) -> CoefficientCurves:
    """Assemble the coefficient curves on the fine grid.

    Knot values are kriged onto the quadrature grid, the level bijection and
    its density are formed, and the curve derivatives are integrated by the
    trapezoid rule anchored at tau0.  The non-crossing inequality
    dbeta0 - |dbeta|_1 > 0 holds by construction and is asserted.
    """
    p = params.p
    sigma = params.sigma
    lam2 = -100.0 * np.log(np.clip(params.knot_corr, 1e-300, 1.0 - 1e-12))

    omega0_fine = gp_interpolate(params.knots, params.omega0, lam2[0], ZETA_GRID)
    zeta, dzeta = zeta_transform(ZETA_GRID, omega0_fine)
    zeta_i = zeta[1:-1]
    dzeta_i = dzeta[1:-1]

    q0 = base.quantile_density(np.clip(zeta_i, _TAIL_CLAMP, 1.0 - _TAIL_CLAMP))
    dbeta0 = sigma * q0 * dzeta_i

    L = TAU_GRID.shape[0]
    w = np.empty((L, p))
    for jp in range(p):
        w[:, jp] = gp_interpolate(params.knots, params.omega[jp], lam2[jp + 1], zeta_i)
    n2 = np.linalg.norm(w, axis=1)
    n1 = np.sum(np.abs(w), axis=1)
    denom = n1 * np.sqrt(1.0 + n2**2)
    scale = np.where(n1 > 0.0, n2 / np.where(denom > 0.0, denom, 1.0), 0.0)
    c = w * scale[:, None]
    dbeta = dbeta0[:, None] * c

    ct0 = np.concatenate(
        [[0.0], np.cumsum(0.5 * (dbeta0[1:] + dbeta0[:-1]) * np.diff(TAU_GRID))]
    )
    beta0 = params.gamma0 + (ct0 - ct0[_TAU0_IDX])
    inc = 0.5 * (dbeta[1:] + dbeta[:-1]) * np.diff(TAU_GRID)[:, None]
    ctb = np.vstack([np.zeros(p), np.cumsum(inc, axis=0)])
    beta = params.gamma[None, :] + (ctb - ctb[_TAU0_IDX])

    # the slack is positive by construction; exact zeros can only come from
    # floating-point underflow of the level-map density (handled by the
    # likelihood's underflow sentinel), so only strict crossings are bugs
    slack = dbeta0 - np.sum(np.abs(dbeta), axis=1)
    if np.any(slack < 0.0):
        raise AssertionError(
            "non-crossing violated on the grid; this indicates a quadrature "
            "or interpolation bug"
        )
    return CoefficientCurves(
        tau_grid=TAU_GRID, beta0=beta0, beta=beta, dbeta0=dbeta0, dbeta=dbeta, base=base
    )


# spec'd operation names, thin wrappers over the curve object


def quantile_value(curves: CoefficientCurves, tau, x):
    return curves.value(tau, x)


def quantile_density(curves: CoefficientCurves, tau, x):
    return curves.density(tau, x)


def invert_quantile(curves: CoefficientCurves, y, x):
    return curves.invert(y, x)
