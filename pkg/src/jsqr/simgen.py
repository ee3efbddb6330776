"""Synthetic-data generators for the simulation protocols.

Three marginal designs (simple regression with S-shaped intercept and
U-shaped slope; a 7-predictor model on the unit ball; a heavy-tailed t3
design) crossed with four dependence structures on the latent quantile
levels (independent, asymmetric-Laplace process, Gaussian copula process,
t copula process).

Table-backed ground-truth marginals share the fine quantile grid and the
trapezoid quadrature with the model curves so that generated truth and
fitted curves follow the same numerical conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .curves import TAU_GRID, BaseDistribution, StudentTBase
from .kernels import effective_range, matern_correlation
from .likelihood import Dataset

__all__ = [
    "ScenarioSpec",
    "SimulatedData",
    "DEFAULT_SUMMARY_TAUS",
    "generate",
    "true_quantile",
    "truth_marginal",
    "al_cdf",
]

DEFAULT_SUMMARY_TAUS = np.concatenate(
    [[0.01, 0.05], np.arange(1, 10) / 10.0, [0.95, 0.99]]
)

_EX2_BETA_HALF = np.array([0.96, -0.38, 0.05, -0.22, -0.80, -0.80, -5.97])
_EX2_BUMPS = np.array(
    [
        [0, 0, -3, -2, 0, 5, -1],
        [-3, 0, 0, 2, 4, 1, 0],
        [0, -2, 2, 2, -4, 0, 0],
    ],
    dtype=float,
)


@dataclass
class ScenarioSpec:
    """One simulation scenario; alpha/phi = None means draw them at random
    (alpha uniform on (0,1), phi uniform over the effective-range band of
    the realized training locations)."""

    marginal: str = "example1"  # example1 | example2 | heavy_tail_t3
    copula: str = "gaussian"  # independent | asymmetric_laplace | gaussian | student_t
    n: int = 200
    n_test: int = 0
    alpha: float | None = 0.7
    nu: float = 2.0
    phi: float | None = 0.3
    psi: float = 3.0
    al_tau: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.marginal not in ("example1", "example2", "heavy_tail_t3"):
            raise ValueError(f"unknown marginal {self.marginal!r}")
        if self.copula not in ("independent", "asymmetric_laplace", "gaussian", "student_t"):
            raise ValueError(f"unknown copula {self.copula!r}")
        if self.n < 1 or self.n_test < 0:
            raise ValueError("need n >= 1 and n_test >= 0")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.al_tau < 1.0:
            raise ValueError("al_tau must lie in (0, 1)")


@dataclass
class SimulatedData:
    train: Dataset
    test: Dataset | None
    truth: dict


# ---------------------------------------------------------------------------
# ground-truth marginals
# ---------------------------------------------------------------------------


class _NormalBase(BaseDistribution):
    name = "normal"

    def pdf(self, z):
        z = np.asarray(z, dtype=float)
        out = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        return out if out.ndim else float(out)

    def cdf(self, z):
        out = special.ndtr(np.asarray(z, dtype=float))
        return out if out.ndim else float(out)

    def quantile(self, u):
        out = special.ndtri(np.asarray(u, dtype=float))
        return out if out.ndim else float(out)

    def variance(self) -> float:
        return 1.0


class Example1Truth:
    """Closed-form simple-regression marginal: S-shaped intercept and
    U-shaped slope, exact at every level."""

    p = 1
    domain = "cube"

    @staticmethod
    def _logfac(tau):
        return -np.log(tau) - np.log1p(-tau)

    def beta0(self, tau):
        tau = np.asarray(tau, dtype=float)
        return 3.0 * (tau - 0.5) * self._logfac(tau)

    def beta(self, tau):
        tau = np.asarray(tau, dtype=float)
        return (4.0 * (tau - 0.5) ** 2 * self._logfac(tau))[..., None]

    def quantile(self, tau, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = self.beta0(tau) + self.beta(tau)[..., 0] * x[0]
        return out

    def quantile_rows(self, u, X):
        u = np.asarray(u, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.beta0(u) + self.beta(u)[:, 0] * X[:, 0]

    def invert(self, y, x):
        lo = np.full_like(np.atleast_1d(y), 1e-12, dtype=float)
        hi = np.full_like(lo, 1.0 - 1e-12)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            too_low = self.quantile_rows(mid, np.tile(np.atleast_1d(x), (len(y), 1))) < y
            lo = np.where(too_low, mid, lo)
            hi = np.where(too_low, hi, mid)
        out = 0.5 * (lo + hi)
        return out if np.ndim(y) else float(out[0])

    def check_valid(self):
        tau = TAU_GRID
        f = self._logfac(tau)
        dfac = (2.0 * tau - 1.0) / (tau * (1.0 - tau))
        db0 = 3.0 * f + 3.0 * (tau - 0.5) * dfac
        db1 = 8.0 * (tau - 0.5) * f + 4.0 * (tau - 0.5) ** 2 * dfac
        if not np.all(db0 - np.abs(db1) > 0.0):
            raise AssertionError("example1 truth violates non-crossing")


def _interp_extend(xq, xs, ys):
    """Linear interpolation with linear extension beyond the node range."""
    out = np.interp(xq, xs, ys)
    lo = xq < xs[0]
    if np.any(lo):
        s = (ys[1] - ys[0]) / (xs[1] - xs[0])
        out[lo] = ys[0] + s * (xq[lo] - xs[0])
    hi = xq > xs[-1]
    if np.any(hi):
        s = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        out[hi] = ys[-1] + s * (xq[hi] - xs[-1])
    return out


class _TableTruth:
    """Ground-truth marginal with an exact, closed-form intercept curve.

    The slope curves come from trapezoid quadrature on the model's fine grid
    (identical conventions as the fitted curves) and are interpolated
    linearly in the base-quantile coordinate z = F0^-1(tau).  In that
    coordinate the intercept is exactly linear with slope `scale`, and every
    slope chord is bounded by scale * sup|c| < scale, so the evaluated
    quantile function is increasing at every level, not just at the nodes.
    """

    def __init__(self, base, scale, beta_nodes, c_nodes, domain):
        self.base = base
        self.scale = float(scale)  # d beta0 / dz
        self.z_nodes = np.asarray(base.quantile(TAU_GRID))
        self.beta_nodes = beta_nodes  # (L, p)
        self.c_nodes = c_nodes  # (L, p), d beta_j / dz / scale
        self.p = beta_nodes.shape[1]
        self.domain = domain  # "cube" or "ball"

    def beta0(self, tau):
        return self.scale * np.asarray(self.base.quantile(tau))

    def beta(self, tau):
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        zq = np.asarray(self.base.quantile(tau))
        return np.column_stack(
            [_interp_extend(zq, self.z_nodes, self.beta_nodes[:, j])
             for j in range(self.p)]
        )

    def quantile_rows(self, u, X):
        u = np.asarray(u, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        zq = np.asarray(self.base.quantile(u))
        out = self.scale * zq
        for j in range(self.p):
            out = out + X[:, j] * _interp_extend(zq, self.z_nodes, self.beta_nodes[:, j])
        return out

    def quantile(self, tau, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        scalar = np.ndim(tau) == 0
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        out = self.quantile_rows(tau, np.tile(x, (len(tau), 1)))
        return float(out[0]) if scalar else out

    def invert(self, y, x):
        scalar = np.ndim(y) == 0
        y = np.atleast_1d(np.asarray(y, dtype=float))
        lo = np.full(len(y), 1e-12)
        hi = np.full(len(y), 1.0 - 1e-12)
        X = np.tile(np.atleast_1d(x), (len(y), 1))
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            too_low = self.quantile_rows(mid, X) < y
            lo = np.where(too_low, mid, lo)
            hi = np.where(too_low, hi, mid)
        out = 0.5 * (lo + hi)
        return float(out[0]) if scalar else out

    def check_valid(self):
        # instantaneous bound at nodes and chord bound between nodes
        norm = (lambda a: np.linalg.norm(a, axis=1)) if self.domain == "ball" \
            else (lambda a: np.sum(np.abs(a), axis=1))
        if not np.all(self.scale - self.scale * norm(self.c_nodes) > 0.0):
            raise AssertionError("tabulated truth violates non-crossing at nodes")
        chords = np.diff(self.beta_nodes, axis=0) / np.diff(self.z_nodes)[:, None]
        if not np.all(self.scale - norm(chords) > 0.0):
            raise AssertionError("tabulated truth violates non-crossing between nodes")


def _quadrature_slopes(base, scale, c_nodes, anchor):
    """Integrate d beta_j = scale * c_j dz by the trapezoid rule over the
    fine grid's image under z = F0^-1.  Integrating in the base-quantile
    coordinate keeps every chord norm below `scale` (the c's are bounded by
    sup |c| < 1), so the interpolated truth cannot cross."""
    z = np.asarray(base.quantile(TAU_GRID))
    idx0 = int(np.argmin(np.abs(TAU_GRID - 0.5)))
    inc = 0.5 * scale * (c_nodes[1:] + c_nodes[:-1]) * np.diff(z)[:, None]
    ct = np.vstack([np.zeros(c_nodes.shape[1]), np.cumsum(inc, axis=0)])
    return anchor[None, :] + (ct - ct[idx0])


def _example2_truth() -> _TableTruth:
    tau = TAU_GRID
    centers = np.array([0.0, 0.5, 1.0])
    bumps = np.exp(-0.5 * ((tau[:, None] - centers[None, :]) / (1.0 / 3.0)) ** 2) / (
        (1.0 / 3.0) * np.sqrt(2.0 * np.pi)
    )
    nu = bumps @ _EX2_BUMPS  # (L, 7)
    c = nu / np.sqrt(1.0 + np.sum(nu**2, axis=1))[:, None]
    base = _NormalBase()
    beta = _quadrature_slopes(base, 1.0, c, _EX2_BETA_HALF)
    return _TableTruth(base, 1.0, beta, c, domain="ball")


def _heavy_tail_truth() -> _TableTruth:
    tau = TAU_GRID
    nu = 3.0 * (tau - 0.5)
    c = (nu / np.sqrt(1.0 + nu**2))[:, None]
    base = StudentTBase(3.0)
    beta = _quadrature_slopes(base, 3.0, c, np.zeros(1))
    return _TableTruth(base, 3.0, beta, c, domain="cube")


def truth_marginal(marginal: str):
    if marginal == "example1":
        truth = Example1Truth()
    elif marginal == "example2":
        truth = _example2_truth()
    elif marginal == "heavy_tail_t3":
        truth = _heavy_tail_truth()
    else:
        raise ValueError(f"unknown marginal {marginal!r}")
    truth.check_valid()
    return truth


def true_quantile(scenario: ScenarioSpec, tau, x):
    """Ground-truth conditional quantile of a scenario's marginal."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0.0) or np.any(tau >= 1.0):
        raise ValueError("tau must lie strictly inside (0, 1)")
    return truth_marginal(scenario.marginal).quantile(tau, x)


# ---------------------------------------------------------------------------
# latent-level fields
# ---------------------------------------------------------------------------


def al_cdf(x, tau: float):
    """CDF of the asymmetric Laplace distribution with density
    tau (1-tau) exp(-rho_tau(x))."""
    x = np.asarray(x, dtype=float)
    neg = tau * np.exp((1.0 - tau) * np.minimum(x, 0.0))
    pos = 1.0 - (1.0 - tau) * np.exp(-tau * np.maximum(x, 0.0))
    out = np.where(x < 0.0, neg, pos)
    return out if out.ndim else float(out)


def _latent_levels(spec: ScenarioSpec, locations, alpha, phi, rng):
    ntot = locations.shape[0]
    if spec.copula == "independent":
        return rng.uniform(size=ntot)
    K = np.asarray(matern_correlation(cdist(locations, locations), spec.nu, phi))
    cov = alpha * K + (1.0 - alpha) * np.eye(ntot)
    cov[np.diag_indices_from(cov)] += 1e-10
    Lc = np.linalg.cholesky(cov)
    zn = Lc @ rng.standard_normal(ntot)
    if spec.copula == "gaussian":
        return np.asarray(special.ndtr(zn))
    if spec.copula == "student_t":
        varphi = rng.gamma(0.5 * spec.psi, 2.0 / spec.psi)
        return np.asarray(special.stdtr(spec.psi, zn / np.sqrt(varphi)))
    # asymmetric Laplace process on the latent levels
    t = spec.al_tau
    xi = rng.exponential(1.0, size=ntot)
    w = np.sqrt(2.0 * xi / (t * (1.0 - t))) * zn + (1.0 - 2.0 * t) / (t * (1.0 - t)) * xi
    return np.asarray(al_cdf(w, t))


def _predictors(spec: ScenarioSpec, ntot, rng):
    if spec.marginal == "example2":
        direction = rng.standard_normal((ntot, 7))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.uniform(size=ntot) ** (1.0 / 7.0)
        return direction * radius[:, None]
    return rng.uniform(-1.0, 1.0, size=(ntot, 1))


def _conditional_truth(spec, taus, z_train, locs_train, locs_test, alpha, phi):
    """True conditional quantile levels of test points given training z."""
    n = len(z_train)
    K = np.asarray(matern_correlation(cdist(locs_train, locs_train), spec.nu, phi))
    R = alpha * K + (1.0 - alpha) * np.eye(n)
    R[np.diag_indices_from(R)] += 1e-10
    cf = cho_factor(R, lower=True)
    rz = cho_solve(cf, z_train)
    Kst = np.asarray(matern_correlation(cdist(locs_test, locs_train), spec.nu, phi))
    out = np.empty((locs_test.shape[0], len(taus)))
    if spec.copula == "student_t":
        d = float(z_train @ rz)
        tq = special.stdtrit(spec.psi + n, taus)
    else:
        zq = special.ndtri(taus)
    for j in range(locs_test.shape[0]):
        kj = Kst[j]
        mu = alpha * float(kj @ rz)
        s2 = max(1.0 - alpha**2 * float(kj @ cho_solve(cf, kj)), 0.0)
        if spec.copula == "student_t":
            spread = np.sqrt((spec.psi + d) / (spec.psi + n) * s2)
            out[j] = special.stdtr(spec.psi, mu + spread * tq)
        else:
            out[j] = special.ndtr(mu + np.sqrt(s2) * zq)
    return np.clip(out, 1e-12, 1.0 - 1e-12)


def generate(spec: ScenarioSpec, summary_taus=None) -> SimulatedData:
    """Draw one dataset (train + optional test) with its ground-truth record.

    The truth record carries the realized dependence parameters, the latent
    levels, induced pairwise correlations for 5 random training locations,
    and (except under the asymmetric-Laplace process) the true conditional
    quantiles of the test points given the training levels.
    """
    rng = np.random.default_rng(spec.seed)
    truth_fn = truth_marginal(spec.marginal)
    ntot = spec.n + spec.n_test
    locations = rng.uniform(size=(ntot, 2))
    x = _predictors(spec, ntot, rng)

    alpha = spec.alpha if spec.alpha is not None else float(rng.uniform())
    if spec.phi is not None:
        phi = spec.phi
    else:
        d_max = float(
            np.max(cdist(locations[: spec.n], locations[: spec.n]))
        )
        r1 = effective_range(spec.nu, 1.0)
        phi = float(rng.uniform(0.25 * d_max / r1, 0.75 * d_max / r1))

    u = _latent_levels(spec, locations, alpha, phi, rng)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    y = truth_fn.quantile_rows(u, x)

    train = Dataset.from_raw(y[: spec.n], x[: spec.n], locations[: spec.n])
    test = None
    if spec.n_test:
        test = Dataset.from_raw(
            y[spec.n:], x[spec.n:], locations[spec.n:], rescale=train.rescale
        )

    pick = rng.choice(spec.n, size=min(5, spec.n), replace=False)
    r_pairs = []
    for a_i in range(len(pick)):
        for b_i in range(a_i + 1, len(pick)):
            i, j = int(pick[a_i]), int(pick[b_i])
            d = float(np.linalg.norm(locations[i] - locations[j]))
            r = 0.0 if spec.copula == "independent" else alpha * float(
                matern_correlation(d, spec.nu, phi)
            )
            r_pairs.append([i, j, r])

    taus = np.asarray(
        DEFAULT_SUMMARY_TAUS if summary_taus is None else summary_taus, dtype=float
    )
    cond = None
    if spec.n_test and spec.copula != "asymmetric_laplace":
        if spec.copula == "independent":
            cond = np.tile(taus, (spec.n_test, 1))
        else:
            psi = spec.psi if spec.copula == "student_t" else None
            z_train = (
                special.stdtrit(psi, u[: spec.n]) if psi else special.ndtri(u[: spec.n])
            )
            cond = _conditional_truth(
                spec, taus, z_train, locations[: spec.n], locations[spec.n:],
                alpha, phi,
            )

    truth = {
        "format": "jsqr-truth-v1",
        "marginal": spec.marginal,
        "copula": spec.copula,
        "n": spec.n,
        "n_test": spec.n_test,
        "alpha": float(alpha),
        "nu": float(spec.nu),
        "phi": float(phi),
        "psi": float(spec.psi) if spec.copula == "student_t" else None,
        "al_tau": float(spec.al_tau) if spec.copula == "asymmetric_laplace" else None,
        "seed": spec.seed,
        "u_train": u[: spec.n].tolist(),
        "u_test": u[spec.n:].tolist(),
        "r_pairs": r_pairs,
        "cond_taus": taus.tolist(),
        "cond_levels_test": None if cond is None else cond.tolist(),
    }
    return SimulatedData(train=train, test=test, truth=truth)
