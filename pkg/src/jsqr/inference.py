"""Posterior inference: infill quantile prediction, WAIC, check loss,
and coefficient-curve summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .copulas import LatentField, recover_latents
from .curves import build_coefficient_curves
from .kernels import CorrelationCache, matern_correlation
from .likelihood import Dataset, per_observation_loglik
from .mcmc import PosteriorDraws

__all__ = [
    "PredictionRequest",
    "PredictionSummary",
    "WaicReport",
    "predict_conditional_quantile",
    "predict_batch",
    "compute_waic",
    "check_loss",
    "summarize_curves",
    "CurveSummary",
]


@dataclass
class PredictionRequest:
    """Covariates (raw scale), location, and target levels for one point."""

    x_star: np.ndarray
    s_star: np.ndarray
    tau_star: np.ndarray

    def __post_init__(self):
        self.x_star = np.atleast_1d(np.asarray(self.x_star, dtype=float))
        self.s_star = np.asarray(self.s_star, dtype=float).reshape(-1)
        self.tau_star = np.atleast_1d(np.asarray(self.tau_star, dtype=float))
        if np.any(np.diff(self.tau_star) <= 0):
            raise ValueError("tau_star must be strictly increasing")


@dataclass
class PredictionSummary:
    tau_star: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    clamped: bool = False


@dataclass
class WaicReport:
    """waic = -2 (lppd - p_waic2); per_observation rows are
    (lppd_i, p_waic2_i, waic_i)."""

    waic: float
    lppd: float
    p_waic2: float
    per_observation: np.ndarray


def check_loss(tau, residual):
    """rho_tau(e) = e * (tau - 1{e < 0})."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0.0) or np.any(tau >= 1.0):
        raise ValueError("tau must lie strictly inside (0, 1)")
    residual = np.asarray(residual, dtype=float)
    out = residual * (tau - (residual < 0.0))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# conditional-quantile prediction
# ---------------------------------------------------------------------------


class _DrawCurves:
    """Per-draw coefficient curves, built lazily and memoized."""

    def __init__(self, draws: PosteriorDraws):
        self.draws = draws
        self._cache: dict[int, object] = {}

    def __getitem__(self, i: int):
        if i not in self._cache:
            self._cache[i] = build_coefficient_curves(
                self.draws.curve_params(i), self.draws.base(i)
            )
        return self._cache[i]


def _draw_scores(draws: PosteriorDraws, cache: CorrelationCache):
    """Per-draw scores z_t and eigen-basis projections b_t = V' z_t."""
    T = draws.n_draws
    n = draws.u.shape[1]
    Z = np.empty((T, n))
    B = np.empty((T, n))
    for t in range(T):
        if draws.copula_family == "gaussian":
            z = special.ndtri(draws.u[t])
        else:
            z = special.stdtrit(draws.psi[t], draws.u[t])
        Z[t] = z
        B[t] = cache.entry(int(draws.phi_index[t])).eigenvectors.T @ z
    return Z, B


def predict_batch(
    x_stars,
    s_stars,
    tau_star,
    draws: PosteriorDraws,
    dataset: Dataset,
    cache: CorrelationCache,
    return_draws: bool = False,
):
    """Vectorized conditional-quantile prediction at q new points.

    Per retained draw, the target levels are pushed through the conditional
    copula at that draw's latent levels, then mapped through the draw's own
    coefficient curves.  Returns a list of PredictionSummary (and optionally
    the full (q, k, T) array of per-draw values).
    """
    x_stars = np.atleast_2d(np.asarray(x_stars, dtype=float))
    s_stars = np.atleast_2d(np.asarray(s_stars, dtype=float))
    tau_star = np.atleast_1d(np.asarray(tau_star, dtype=float))
    q, k = x_stars.shape[0], tau_star.shape[0]
    T = draws.n_draws
    n = draws.u.shape[1]
    curves_bank = _DrawCurves(draws)
    gauss = draws.copula_family == "gaussian"
    zq_tau = special.ndtri(tau_star)

    alpha = draws.alpha
    if n:
        Z, B = _draw_scores(draws, cache)
        lam = {g: cache.entry(g).eigenvalues for g in set(int(v) for v in draws.phi_index)}
        m_t = [alpha[t] * lam[int(draws.phi_index[t])] + 1.0 - alpha[t] for t in range(T)]
        if not gauss:
            d_t = np.array([np.sum(B[t] ** 2 / m_t[t]) for t in range(T)])

    values = np.empty((q, k, T))
    clamped = np.zeros(q, dtype=bool)
    for iq in range(q):
        xr, was_clamped = dataset.rescale_point(x_stars[iq])
        clamped[iq] = was_clamped
        if n:
            a_g = {
                g: cache.entry(g).eigenvectors.T @ cache.cross_correlation(g, s_stars[iq])
                for g in lam
            }
        for t in range(T):
            al = alpha[t]
            if n == 0 or al == 0.0:
                tau_adj = tau_star
            else:
                g = int(draws.phi_index[t])
                a = a_g[g]
                mu = al * np.sum(a * B[t] / m_t[t])
                s2 = 1.0 - al**2 * np.sum(a * a / m_t[t])
                if s2 < -1e-10:
                    raise np.linalg.LinAlgError(f"negative predictive variance {s2:.3e}")
                s2 = max(s2, 0.0)
                if gauss:
                    tau_adj = special.ndtr(mu + np.sqrt(s2) * zq_tau)
                else:
                    psi = draws.psi[t]
                    spread = np.sqrt((psi + d_t[t]) / (psi + n) * s2)
                    tau_adj = special.stdtr(
                        psi, mu + spread * special.stdtrit(psi + n, tau_star)
                    )
            tau_adj = np.clip(tau_adj, 1e-12, 1.0 - 1e-12)
            vals = curves_bank[t].value(tau_adj, xr)
            if np.any(np.diff(vals) < -1e-9):
                raise AssertionError("predicted quantiles decrease in tau")
            values[iq, :, t] = vals

    summaries = []
    for iq in range(q):
        block = values[iq]
        summaries.append(
            PredictionSummary(
                tau_star=tau_star,
                mean=block.mean(axis=1),
                median=np.median(block, axis=1),
                lower=np.quantile(block, 0.025, axis=1),
                upper=np.quantile(block, 0.975, axis=1),
                clamped=bool(clamped[iq]),
            )
        )
    if return_draws:
        return summaries, values
    return summaries


def predict_conditional_quantile(
    request: PredictionRequest,
    draws: PosteriorDraws,
    dataset: Dataset,
    cache: CorrelationCache,
) -> PredictionSummary:
    """Posterior summary of the conditional quantile at one new point."""
    return predict_batch(
        request.x_star[None, :], request.s_star[None, :], request.tau_star,
        draws, dataset, cache,
    )[0]


# ---------------------------------------------------------------------------
# WAIC with latent recovery
# ---------------------------------------------------------------------------


def compute_waic(
    draws: PosteriorDraws,
    dataset: Dataset,
    cache: CorrelationCache,
    rng: np.random.Generator,
) -> WaicReport:
    """WAIC treating the spatial process (and the t-copula mixing variable)
    as parameters: one latent draw per retained parameter draw."""
    T = draws.n_draws
    n = dataset.n
    if T < 2:
        raise ValueError("need at least two posterior draws for WAIC")
    ll = np.empty((T, n))
    for t in range(T):
        cp = draws.curve_params(t)
        cop = draws.copula_params(t)
        base = draws.base(t)
        if draws.copula_family == "gaussian":
            z = special.ndtri(draws.u[t])
        else:
            z = special.stdtrit(cop.psi, draws.u[t])
        if cop.alpha == 0.0 and cop.psi is None:
            latents = LatentField(z=z, w=np.zeros(n), v=draws.u[t].copy())
        else:
            latents = recover_latents(z, cop, cache.entry(cop.phi_index), rng)
        ll[t] = per_observation_loglik(dataset, cp, cop, latents, base)
    col_max = ll.max(axis=0)
    lppd_i = col_max + np.log(np.mean(np.exp(ll - col_max[None, :]), axis=0))
    p_i = np.var(ll, axis=0, ddof=1)
    waic_i = -2.0 * (lppd_i - p_i)
    per_obs = np.column_stack([lppd_i, p_i, waic_i])
    lppd = float(np.sum(lppd_i))
    p_waic2 = float(np.sum(p_i))
    return WaicReport(
        waic=-2.0 * (lppd - p_waic2), lppd=lppd, p_waic2=p_waic2,
        per_observation=per_obs,
    )


# ---------------------------------------------------------------------------
# curve summaries
# ---------------------------------------------------------------------------


@dataclass
class CurveSummary:
    """Pointwise posterior summaries of the coefficient curves, optional
    induced-correlation and differential-effect summaries."""

    taus: np.ndarray
    beta0_mean: np.ndarray
    beta0_median: np.ndarray
    beta0_lower: np.ndarray
    beta0_upper: np.ndarray
    beta_mean: np.ndarray  # (L, p)
    beta_median: np.ndarray
    beta_lower: np.ndarray
    beta_upper: np.ndarray
    r_pairs: dict = field(default_factory=dict)
    diff_effects: dict = field(default_factory=dict)


def _raw_scale_curves(beta0_vals, beta_vals, rescale):
    """Undo the [-1,1]^p predictor map so curves refer to raw predictors."""
    lo, hi = rescale[:, 0], rescale[:, 1]
    h = 0.5 * (hi - lo)
    c = 0.5 * (hi + lo)
    ok = h > 0
    beta_raw = np.zeros_like(beta_vals)
    beta_raw[:, ok] = beta_vals[:, ok] / h[ok]
    beta0_raw = beta0_vals - beta_raw @ c
    return beta0_raw, beta_raw


def summarize_curves(
    draws: PosteriorDraws,
    taus,
    rescale=None,
    locations=None,
    pairs=None,
    diff_levels=None,
) -> CurveSummary:
    """Posterior mean/median and equal-tailed 95% intervals of the curves.

    With `rescale` the curves are mapped back to the raw predictor scale.
    `pairs` requests induced-correlation summaries r_ij = alpha * rho(d_ij)
    (the i = j convention reports alpha itself); `diff_levels` requests
    slope differences beta(tau2) - beta(tau1).
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    T = draws.n_draws
    p = draws.p
    L = taus.shape[0]
    b0 = np.empty((T, L))
    bb = np.empty((T, L, p))
    bank = _DrawCurves(draws)
    for t in range(T):
        cur = bank[t]
        b0[t] = np.interp(taus, cur.tau_grid, cur.beta0)
        for j in range(p):
            bb[t, :, j] = np.interp(taus, cur.tau_grid, cur.beta[:, j])
        if rescale is not None:
            b0[t], bb[t] = _raw_scale_curves(b0[t], bb[t], np.asarray(rescale, dtype=float))
    summary = CurveSummary(
        taus=taus,
        beta0_mean=b0.mean(axis=0),
        beta0_median=np.median(b0, axis=0),
        beta0_lower=np.quantile(b0, 0.025, axis=0),
        beta0_upper=np.quantile(b0, 0.975, axis=0),
        beta_mean=bb.mean(axis=0),
        beta_median=np.median(bb, axis=0),
        beta_lower=np.quantile(bb, 0.025, axis=0),
        beta_upper=np.quantile(bb, 0.975, axis=0),
    )
    if pairs is not None:
        if locations is None:
            raise ValueError("induced-correlation summaries need locations")
        locations = np.asarray(locations, dtype=float)
        alpha = draws.alpha
        rho_table = np.empty((len(pairs), len(draws.phi_grid)))
        dists = [
            np.linalg.norm(locations[i] - locations[j]) for (i, j) in pairs
        ]
        for gi, phi in enumerate(draws.phi_grid):
            rho_table[:, gi] = [
                matern_correlation(d, draws.nu, phi) for d in dists
            ]
        for ip, (i, j) in enumerate(pairs):
            r_draws = alpha * rho_table[ip, draws.phi_index.astype(int)]
            summary.r_pairs[(int(i), int(j))] = {
                "mean": float(r_draws.mean()),
                "median": float(np.median(r_draws)),
                "lower": float(np.quantile(r_draws, 0.025)),
                "upper": float(np.quantile(r_draws, 0.975)),
            }
    if diff_levels is not None:
        for (t1, t2) in diff_levels:
            v1 = np.empty((T, p))
            v2 = np.empty((T, p))
            for t in range(T):
                cur = bank[t]
                for j in range(p):
                    v1[t, j] = np.interp(t1, cur.tau_grid, cur.beta[:, j])
                    v2[t, j] = np.interp(t2, cur.tau_grid, cur.beta[:, j])
                if rescale is not None:
                    rs = np.asarray(rescale, dtype=float)
                    h = 0.5 * (rs[:, 1] - rs[:, 0])
                    ok = h > 0
                    v1[t, ok] = v1[t, ok] / h[ok]
                    v2[t, ok] = v2[t, ok] / h[ok]
            diff = v2 - v1
            summary.diff_effects[(float(t1), float(t2))] = {
                "median": np.median(diff, axis=0),
                "lower": np.quantile(diff, 0.025, axis=0),
                "upper": np.quantile(diff, 0.975, axis=0),
            }
    return summary
