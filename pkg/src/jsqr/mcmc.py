"""Priors and the adaptive blocked Metropolis-within-Gibbs sampler.

Each iteration cycles through
  1. blocked random-walk Metropolis on the marginal parameters
     (location block; error scale + hyperparameters; one block per
     shape-function knot vector) given the spatial scale and decay,
  2. a Metropolis update of the spatial scale (plus, for the t copula,
     its dof),
  3. an exact draw of the decay parameter from its discrete full
     conditional over the cached grid,
  4. a joint Metropolis update of (spatial scale, error scale).

Scales are sampled as (log sigma_s, log sigma_e); the prior is specified on
(sigma^2, alpha) and the change of variables is accounted for in the target.
Proposal scales adapt by Robbins-Monro toward a target acceptance rate and
proposal covariances adapt from running sample moments; all adaptation
freezes at the end of burn-in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import copulas
from .copulas import CopulaParams
from .curves import (
    BaseDistribution,
    LogisticBase,
    QuantileCurveParams,
    StudentTBase,
    build_coefficient_curves,
    default_knots,
)
from .kernels import CorrelationCache
from .likelihood import Dataset

__all__ = [
    "PriorSpec",
    "McmcConfig",
    "HyperParams",
    "PosteriorDraws",
    "McmcAbort",
    "log_prior",
    "run_mcmc",
    "sample_phi_full_conditional",
    "effective_sample_size",
]

_DENSITY_FLOOR = 1e-300
_JITTER = 1e-10
_COV_WARM = 100  # block updates before covariance adaptation kicks in
_ABORT_WINDOW = 500
_REFRESH_EVERY = 500  # periodic full re-evaluation to kill table drift


class McmcAbort(RuntimeError):
    """Raised when a proposal block is persistently rejected with -inf."""


@dataclass
class PriorSpec:
    """Hyperpriors; defaults follow the diffuse specification."""

    kappa2_shape: float = 0.1
    kappa2_rate: float = 0.1
    lambda_corr_beta: tuple = (6.0, 4.0)
    alpha_prior: str = "uniform"  # uniform | beta | truncated
    alpha_beta: tuple = (1.0, 1.0)
    alpha_bounds: tuple = (0.0, 1.0)
    psi_bounds: tuple = (2.0, 20.0)
    base_dof_bounds: tuple = (2.0, 60.0)

    def __post_init__(self):
        if self.alpha_prior not in ("uniform", "beta", "truncated"):
            raise ValueError(f"unknown alpha prior {self.alpha_prior!r}")
        for v in (self.kappa2_shape, self.kappa2_rate, *self.lambda_corr_beta):
            if v <= 0:
                raise ValueError("hyperparameters must be positive")


@dataclass
class McmcConfig:
    n_iter: int = 20000
    burn_in: int = 10000
    thin_to: int = 500
    target_accept: float = 0.234
    adapt_decay: float = 0.7
    rng_seed: int = 0
    copula_family: str = "gaussian"  # gaussian | student_t
    base_family: str = "logistic"  # logistic | student_t
    fix_alpha_zero: bool = False
    parametrization: str = "sigma_s_sigma_e"  # or "sigma2_alpha"
    n_knots: int = 11
    block_filter: tuple | None = None  # names of the only blocks to update

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin_to < 2 or self.thin_to > self.n_iter - self.burn_in:
            raise ValueError("need 2 <= thin_to <= n_iter - burn_in")
        if self.copula_family not in ("gaussian", "student_t"):
            raise ValueError(f"unknown copula family {self.copula_family!r}")
        if self.base_family not in ("logistic", "student_t"):
            raise ValueError(f"unknown base family {self.base_family!r}")
        if self.parametrization not in ("sigma_s_sigma_e", "sigma2_alpha"):
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        if self.fix_alpha_zero and self.parametrization != "sigma_s_sigma_e":
            raise ValueError("fix_alpha_zero requires the sigma_s/sigma_e parametrization")


@dataclass
class HyperParams:
    """GP amplitude per shape function; base dof when the base is t."""

    kappa2: np.ndarray
    base_dof: float | None = None


# ---------------------------------------------------------------------------
# prior density (natural parameter space)
# ---------------------------------------------------------------------------


def _gp_knot_terms(values, knots, lam2):
    """(logdet R, v' R^-1 v) for the knot kernel exp(-lam2 |dt|)."""
    R = np.exp(-lam2 * np.abs(knots[:, None] - knots[None, :]))
    R[np.diag_indices_from(R)] += _JITTER
    L = np.linalg.cholesky(R)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    sol = np.linalg.solve(L, values)
    return logdet, float(sol @ sol)


def _alpha_logprior(alpha: float, prior: PriorSpec) -> float:
    if prior.alpha_prior == "uniform":
        return 0.0 if 0.0 <= alpha <= 1.0 else -np.inf
    if prior.alpha_prior == "beta":
        a, b = prior.alpha_beta
        if not 0.0 < alpha < 1.0:
            return -np.inf
        return (
            (a - 1.0) * np.log(alpha)
            + (b - 1.0) * np.log1p(-alpha)
            + special.gammaln(a + b)
            - special.gammaln(a)
            - special.gammaln(b)
        )
    lo, hi = prior.alpha_bounds
    return -np.log(hi - lo) if lo <= alpha <= hi else -np.inf


def _shape_logprior(
    omega_all: np.ndarray, knots, kappa2, corr, dof, prior: PriorSpec
) -> float:
    """GP terms for the shape functions, plus kappa^2, knot-correlation and
    base-dof priors.  omega_all stacks omega0 and the p slope functions."""
    a, b = prior.kappa2_shape, prior.kappa2_rate
    ba, bb = prior.lambda_corr_beta
    m = omega_all.shape[1]
    total = 0.0
    for j in range(omega_all.shape[0]):
        g = corr[j]
        if not 0.0 < g < 1.0 or kappa2[j] <= 0.0:
            return -np.inf
        lam2 = -100.0 * np.log(g)
        logdet, quad = _gp_knot_terms(omega_all[j], knots, lam2)
        total += -0.5 * (m * np.log(kappa2[j]) + logdet) - quad / (2.0 * kappa2[j])
        total += a * np.log(b) - special.gammaln(a) - (a + 1.0) * np.log(kappa2[j]) - b / kappa2[j]
        total += (
            (ba - 1.0) * np.log(g)
            + (bb - 1.0) * np.log1p(-g)
            + special.gammaln(ba + bb)
            - special.gammaln(ba)
            - special.gammaln(bb)
        )
    if dof is not None:
        lo, hi = prior.base_dof_bounds
        if not lo < dof < hi:
            return -np.inf
        total += -np.log(hi - lo)
    return float(total)


def log_prior(
    curve_params: QuantileCurveParams,
    copula_params: CopulaParams,
    hyper: HyperParams,
    prior: PriorSpec,
    n_phi: int = 1,
) -> float:
    """Joint log prior density in the natural parameter space.

    Additive constants that do not involve any parameter are kept only where
    the distributions are proper; the (gamma0, gamma, sigma^2) block enters
    through the improper 1/sigma^2 term.
    """
    omega_all = np.vstack([curve_params.omega0[None, :], curve_params.omega])
    total = _shape_logprior(
        omega_all, curve_params.knots, hyper.kappa2, curve_params.knot_corr,
        hyper.base_dof, prior,
    )
    if not np.isfinite(total):
        return -np.inf
    if curve_params.sigma2 <= 0:
        return -np.inf
    total += -np.log(curve_params.sigma2)
    total += _alpha_logprior(copula_params.alpha, prior)
    total += -np.log(n_phi)
    if copula_params.psi is not None:
        lo, hi = prior.psi_bounds
        if not lo < copula_params.psi < hi:
            return -np.inf
        total += -np.log(hi - lo)
    return float(total)


# ---------------------------------------------------------------------------
# posterior draws container
# ---------------------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in draws plus derived quantities and diagnostics."""

    gamma0: np.ndarray
    gamma: np.ndarray
    sigma_s2: np.ndarray
    sigma_e2: np.ndarray
    omega0: np.ndarray
    omega: np.ndarray
    kappa2: np.ndarray
    knot_corr: np.ndarray
    phi_index: np.ndarray
    psi: np.ndarray
    base_dof: np.ndarray
    u: np.ndarray
    loglik: np.ndarray
    chain: np.ndarray
    knots: np.ndarray
    phi_grid: np.ndarray
    nu: float
    copula_family: str
    base_family: str
    diagnostics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.gamma0.shape[0]

    @property
    def p(self) -> int:
        return self.gamma.shape[1]

    @property
    def sigma2(self) -> np.ndarray:
        return self.sigma_s2 + self.sigma_e2

    @property
    def alpha(self) -> np.ndarray:
        return self.sigma_s2 / self.sigma2

    def curve_params(self, i: int) -> QuantileCurveParams:
        return QuantileCurveParams(
            gamma0=float(self.gamma0[i]),
            gamma=self.gamma[i].copy(),
            sigma_s2=float(self.sigma_s2[i]),
            sigma_e2=float(self.sigma_e2[i]),
            omega0=self.omega0[i].copy(),
            omega=self.omega[i].copy(),
            knots=self.knots.copy(),
            knot_corr=self.knot_corr[i].copy(),
        )

    def copula_params(self, i: int) -> CopulaParams:
        psi = None if self.copula_family == "gaussian" else float(self.psi[i])
        return CopulaParams(
            alpha=float(self.alpha[i]), phi_index=int(self.phi_index[i]),
            nu=self.nu, psi=psi,
        )

    def base(self, i: int) -> BaseDistribution:
        if self.base_family == "logistic":
            return LogisticBase()
        return StudentTBase(float(self.base_dof[i]))

    _ARRAYS = (
        "gamma0", "gamma", "sigma_s2", "sigma_e2", "omega0", "omega",
        "kappa2", "knot_corr", "phi_index", "psi", "base_dof", "u",
        "loglik", "chain", "knots", "phi_grid",
    )

    def save(self, path):
        payload = {name: getattr(self, name) for name in self._ARRAYS}
        header = {
            "format": "jsqr-draws-v1",
            "nu": self.nu,
            "copula_family": self.copula_family,
            "base_family": self.base_family,
            "diagnostics": _jsonable(self.diagnostics),
            "meta": _jsonable(self.meta),
        }
        payload["header"] = np.array(json.dumps(header, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path) -> "PosteriorDraws":
        with np.load(path, allow_pickle=False) as npz:
            header = json.loads(str(npz["header"]))
            if header.get("format") != "jsqr-draws-v1":
                raise ValueError("unrecognized draws file format")
            kwargs = {name: npz[name] for name in cls._ARRAYS}
        return cls(
            **kwargs,
            nu=float(header["nu"]),
            copula_family=header["copula_family"],
            base_family=header["base_family"],
            diagnostics=header["diagnostics"],
            meta=header["meta"],
        )

    @classmethod
    def concat(cls, parts: list) -> "PosteriorDraws":
        first = parts[0]
        kwargs = {}
        for name in cls._ARRAYS:
            if name in ("knots", "phi_grid"):
                kwargs[name] = getattr(first, name)
            elif name == "chain":
                kwargs[name] = np.concatenate(
                    [np.full(pt.n_draws, k, dtype=np.int64) for k, pt in enumerate(parts)]
                )
            else:
                kwargs[name] = np.concatenate([getattr(pt, name) for pt in parts])
        return cls(
            **kwargs,
            nu=first.nu,
            copula_family=first.copula_family,
            base_family=first.base_family,
            diagnostics={f"chain{k}": _jsonable(pt.diagnostics) for k, pt in enumerate(parts)},
            meta=dict(first.meta),
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def effective_sample_size(x) -> float:
    """ESS from the initial-positive-sequence autocorrelation estimator."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if not np.all(np.isfinite(x)):
        return float("nan")
    if n < 4 or np.allclose(x, x[0]):
        return float(n)
    xc = x - x.mean()
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f))[:n].real / n
    if not np.isfinite(acov[0]) or acov[0] <= 0.0:
        return float("nan")
    rho = acov / acov[0]
    tau = 1.0
    k = 1
    while k + 1 < n:
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
        k += 2
    return float(min(n, n / max(tau, 1e-12)))


# ---------------------------------------------------------------------------
# sampler internals
# ---------------------------------------------------------------------------


@dataclass
class _Eval:
    """Cached state evaluation; tables allow cheap shift/rescale proposals."""

    Q: np.ndarray | None
    D: np.ndarray | None
    u: np.ndarray
    z: np.ndarray
    marg: float
    cop: float
    pr_shape: float
    pr_scale: float
    pr_psi: float
    gamma_row: np.ndarray | None
    sigma2: float
    curves: object | None = None

    @property
    def logpost(self) -> float:
        return self.marg + self.cop + self.pr_shape + self.pr_scale + self.pr_psi


class _Block:
    def __init__(self, name, idx, pre_sd, target, decay):
        self.name = name
        self.idx = np.asarray(idx, dtype=np.intp)
        self.d = len(self.idx)
        self.pre_sd = np.asarray(pre_sd, dtype=float)
        self.log_scale = np.log(2.38 / np.sqrt(self.d)) + np.log(0.1)
        self.target = target
        self.decay = decay
        self.t = 0
        self.n_prop = 0
        self.n_acc = 0
        self.mom_n = 0
        self.mean = np.zeros(self.d)
        self.m2 = np.zeros((self.d, self.d))
        self.chol = None
        self.win_prop = 0
        self.win_neginf = 0

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))

    def step(self, rng) -> np.ndarray:
        eps = rng.standard_normal(self.d)
        if self.chol is not None:
            # mixture proposal: mostly the adapted covariance, occasionally a
            # small fixed step so the chain cannot lock into a bad estimate
            if rng.uniform() < 0.95:
                return self.scale * (self.chol @ eps)
            return (0.1 / np.sqrt(self.d)) * (self.pre_sd * eps)
        return self.scale * (self.pre_sd * eps)

    def adapt_scale(self, a_prob: float):
        self.t += 1
        self.log_scale += self.t ** (-self.decay) * (a_prob - self.target)

    def update_moments(self, value: np.ndarray):
        self.mom_n += 1
        delta = value - self.mean
        self.mean += delta / self.mom_n
        self.m2 += np.outer(delta, value - self.mean)
        if self.mom_n > _COV_WARM:
            cov = self.m2 / (self.mom_n - 1)
            cov = cov + 1e-8 * np.eye(self.d)
            try:
                self.chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                self.chol = None

    def track_neginf(self, was_neginf: bool):
        self.win_prop += 1
        if was_neginf:
            self.win_neginf += 1
        if self.win_prop >= _ABORT_WINDOW:
            if self.win_neginf >= 0.99 * self.win_prop:
                raise McmcAbort(
                    f"block {self.name!r}: {self.win_neginf}/{self.win_prop} "
                    "proposals rejected with -inf; check data scaling and bounds"
                )
            self.win_prop = 0
            self.win_neginf = 0


class _Sampler:
    def __init__(self, dataset: Dataset, config: McmcConfig, prior: PriorSpec,
                 cache: CorrelationCache):
        self.data = dataset
        self.cfg = config
        self.prior = prior
        self.cache = cache
        self.rng = np.random.default_rng(config.rng_seed)
        self.n = dataset.n
        self.p = dataset.p
        self.m = config.n_knots
        self.knots = default_knots(self.m)
        self.G = cache.size
        self.t_base = config.base_family == "student_t"
        self.t_cop = config.copula_family == "student_t"
        self.mode_b = config.parametrization == "sigma2_alpha"
        self.fix_alpha = config.fix_alpha_zero
        self._layout()
        self.theta = self._init_theta()
        self.phi_index = self.G // 2
        self._build_blocks()
        self.ev = self._full_eval(self.theta)
        if self.ev is None or not np.isfinite(self.ev.logpost):
            raise McmcAbort("initial state has non-finite posterior density")

    # -- layout --------------------------------------------------------------

    def _layout(self):
        slots: dict[str, slice] = {}
        pos = 0

        def add(name, size):
            nonlocal pos
            slots[name] = slice(pos, pos + size)
            pos += size

        add("gamma0", 1)
        add("gamma", self.p)
        if self.mode_b:
            add("ls2", 1)
            add("lal", 1)
        else:
            add("lse", 1)
            if not self.fix_alpha:
                add("lss", 1)
        for j in range(self.p + 1):
            add(f"om{j}", self.m)
        add("lk2", self.p + 1)
        add("lg", self.p + 1)
        if self.t_base:
            add("ldof", 1)
        if self.t_cop:
            add("lpsi", 1)
        self.slots = slots
        self.dim = pos

    def _get(self, theta, name):
        return theta[self.slots[name]]

    # -- parameter views ------------------------------------------------------

    def _scales(self, theta):
        """(sigma_s2, sigma_e2) from the sampling coordinates."""
        if self.mode_b:
            s2 = np.exp(float(self._get(theta, "ls2")[0]))
            al = special.expit(float(self._get(theta, "lal")[0]))
            return al * s2, (1.0 - al) * s2
        se2 = np.exp(2.0 * float(self._get(theta, "lse")[0]))
        if self.fix_alpha:
            return 0.0, se2
        ss2 = np.exp(2.0 * float(self._get(theta, "lss")[0]))
        return ss2, se2

    def _omega_all(self, theta):
        out = np.empty((self.p + 1, self.m))
        for j in range(self.p + 1):
            out[j] = self._get(theta, f"om{j}")
        return out

    def _curve_params(self, theta) -> QuantileCurveParams:
        ss2, se2 = self._scales(theta)
        om = self._omega_all(theta)
        return QuantileCurveParams(
            gamma0=float(self._get(theta, "gamma0")[0]),
            gamma=self._get(theta, "gamma").copy(),
            sigma_s2=ss2,
            sigma_e2=se2,
            omega0=om[0],
            omega=om[1:],
            knots=self.knots,
            knot_corr=special.expit(self._get(theta, "lg")),
        )

    def _base(self, theta) -> BaseDistribution:
        if not self.t_base:
            return LogisticBase()
        lo, hi = self.prior.base_dof_bounds
        dof = lo + (hi - lo) * special.expit(float(self._get(theta, "ldof")[0]))
        return StudentTBase(dof)

    def _psi(self, theta) -> float | None:
        if not self.t_cop:
            return None
        lo, hi = self.prior.psi_bounds
        return lo + (hi - lo) * special.expit(float(self._get(theta, "lpsi")[0]))

    def _alpha(self, theta) -> float:
        ss2, se2 = self._scales(theta)
        return ss2 / (ss2 + se2)

    # -- initialization --------------------------------------------------------

    def _init_theta(self) -> np.ndarray:
        theta = np.zeros(self.dim)
        if self.n > self.p + 1:
            X1 = np.column_stack([np.ones(self.n), self.data.x])
            coef, *_ = np.linalg.lstsq(X1, self.data.y, rcond=None)
            resid = self.data.y - X1 @ coef
            rv = float(np.var(resid, ddof=min(self.p + 1, self.n - 1)))
            theta[self.slots["gamma0"]] = coef[0]
            theta[self.slots["gamma"]] = coef[1:]
        else:
            rv = float(np.var(self.data.y)) if self.n > 1 else 1.0
        base_var = StudentTBase(10.0).variance() if self.t_base else LogisticBase().variance()
        s2 = max(rv, 1e-4) / base_var
        if self.mode_b:
            theta[self.slots["ls2"]] = np.log(s2)
            theta[self.slots["lal"]] = 0.0  # alpha = 1/2
        else:
            theta[self.slots["lse"]] = 0.5 * np.log(s2 if self.fix_alpha else s2 / 2.0)
            if not self.fix_alpha:
                theta[self.slots["lss"]] = 0.5 * np.log(s2 / 2.0)
        theta[self.slots["lg"]] = special.logit(0.6)
        if self.t_base:
            lo, hi = self.prior.base_dof_bounds
            theta[self.slots["ldof"]] = special.logit((10.0 - lo) / (hi - lo))
        if self.t_cop:
            lo, hi = self.prior.psi_bounds
            theta[self.slots["lpsi"]] = special.logit((10.0 - lo) / (hi - lo))
        return theta

    # -- blocks -----------------------------------------------------------------

    def _build_blocks(self):
        cfg = self.cfg
        sd_y = float(np.std(self.data.y)) if self.n > 1 else 1.0
        sd_y = max(sd_y, 1e-3)

        def mk(name, names_sizes, pre):
            idx = np.concatenate([np.arange(s.start, s.stop) for s in names_sizes])
            return _Block(name, idx, pre, cfg.target_accept, cfg.adapt_decay)

        loc_slices = [self.slots["gamma0"], self.slots["gamma"]]
        self.b_loc = mk("loc", loc_slices, np.full(1 + self.p, 0.5 * sd_y))
        sh = [self.slots["ls2"] if self.mode_b else self.slots["lse"],
              self.slots["lk2"], self.slots["lg"]]
        if self.t_base:
            sh.append(self.slots["ldof"])
        d_sh = sum(s.stop - s.start for s in sh)
        self.b_scale_hyper = mk("scale_hyper", sh, np.full(d_sh, 0.3))
        self.b_om = [
            mk(f"om{j}", [self.slots[f"om{j}"]], np.full(self.m, 0.3))
            for j in range(self.p + 1)
        ]
        self.b_spatial = None
        self.b_joint = None
        if not self.fix_alpha:
            if self.mode_b:
                self.b_spatial = mk("spatial", [self.slots["lal"]], np.array([0.5]))
                self.b_joint = mk("joint_scale", [self.slots["ls2"], self.slots["lal"]],
                                  np.array([0.3, 0.5]))
            else:
                self.b_spatial = mk("spatial", [self.slots["lss"]], np.array([0.3]))
                self.b_joint = mk("joint_scale", [self.slots["lss"], self.slots["lse"]],
                                  np.array([0.3, 0.3]))
        self.b_psi = mk("psi", [self.slots["lpsi"]], np.array([0.5])) if self.t_cop else None
        # a jointly adapted block over every marginal parameter breaks the
        # strong cross-correlation between location, scale and shape moves
        all_slices = loc_slices + sh + [self.slots[f"om{j}"] for j in range(self.p + 1)]
        pre_all = np.concatenate([
            np.full(1 + self.p, 0.5 * sd_y), np.full(d_sh, 0.3),
            np.full((self.p + 1) * self.m, 0.3),
        ])
        self.b_all = mk("all_marginal", all_slices, pre_all)
        self.step1 = [self.b_loc, self.b_scale_hyper] + self.b_om + [self.b_all]
        self.all_blocks = list(self.step1)
        for b in (self.b_spatial, self.b_psi, self.b_joint):
            if b is not None:
                self.all_blocks.append(b)

    def _enabled(self, name: str) -> bool:
        return self.cfg.block_filter is None or name in self.cfg.block_filter

    # -- prior components (include sampling-coordinate jacobians) ---------------

    def _pr_shape(self, theta) -> float:
        om = self._omega_all(theta)
        lk2 = self._get(theta, "lk2")
        lg = self._get(theta, "lg")
        kappa2 = np.exp(lk2)
        g = special.expit(lg)
        dof = None
        if self.t_base:
            lo, hi = self.prior.base_dof_bounds
            s = special.expit(float(self._get(theta, "ldof")[0]))
            dof = lo + (hi - lo) * s
        try:
            nat = _shape_logprior(om, self.knots, kappa2, g, dof, self.prior)
        except np.linalg.LinAlgError:
            return -np.inf
        if not np.isfinite(nat):
            return -np.inf
        jac = float(np.sum(lk2)) + float(np.sum(np.log(g) + np.log1p(-g)))
        if self.t_base:
            jac += float(np.log(s) + np.log1p(-s))
        return nat + jac

    def _pr_scale(self, theta) -> float:
        ss2, se2 = self._scales(theta)
        s2 = ss2 + se2
        if not np.isfinite(s2) or s2 <= 0:
            return -np.inf
        if self.fix_alpha:
            return 0.0  # flat in log sigma_e; alpha pinned at 0
        alpha = ss2 / s2
        a_term = _alpha_logprior(alpha, self.prior)
        if not np.isfinite(a_term):
            return -np.inf
        if self.mode_b:
            return float(a_term + np.log(alpha) + np.log1p(-alpha))
        return float(a_term + np.log(4.0) + np.log(ss2) + np.log(se2) - 2.0 * np.log(s2))

    def _pr_psi(self, theta) -> float:
        if not self.t_cop:
            return 0.0
        s = special.expit(float(self._get(theta, "lpsi")[0]))
        return float(np.log(s) + np.log1p(-s))

    # -- likelihood pieces -------------------------------------------------------

    def _z_from_u(self, u, psi):
        if psi is None:
            return special.ndtri(u)
        return special.stdtrit(psi, u)

    def _cop(self, z, alpha, psi, phi_index) -> float:
        if self.n <= 1:
            return 0.0
        entry = self.cache.entry(phi_index)
        if psi is None:
            if alpha == 0.0:
                return 0.0
            return copulas.gaussian_copula_logdensity_z(z, alpha, entry)
        return copulas.t_copula_logdensity_z(z, alpha, psi, entry)

    def _full_eval(self, theta) -> _Eval | None:
        try:
            params = self._curve_params(theta)
            base = self._base(theta)
            curves = build_coefficient_curves(params, base)
        except (np.linalg.LinAlgError, AssertionError, ValueError, OverflowError):
            return None
        pr_shape = self._pr_shape(theta)
        pr_scale = self._pr_scale(theta)
        pr_psi = self._pr_psi(theta)
        if not (np.isfinite(pr_shape) and np.isfinite(pr_scale)):
            return None
        psi = self._psi(theta)
        if self.n == 0:
            return _Eval(None, None, np.empty(0), np.empty(0), 0.0, 0.0,
                         pr_shape, pr_scale, pr_psi, None, params.sigma2, curves)
        Q, D = curves.row_tables(self.data.x)
        u = curves.invert_rows(Q, D, self.data.y)
        dens = curves.density_rows(D, u)
        if not np.all(np.isfinite(dens)) or np.any(dens < _DENSITY_FLOOR):
            return None
        marg = -float(np.sum(np.log(dens)))
        z = self._z_from_u(u, psi)
        cop = self._cop(z, params.alpha, psi, self.phi_index)
        if not np.isfinite(marg + cop):
            return None
        gamma_row = self._get(theta, "gamma0")[0] + self.data.x @ self._get(theta, "gamma")
        return _Eval(Q, D, u, z, marg, cop, pr_shape, pr_scale, pr_psi,
                     gamma_row, params.sigma2, curves)

    def _tables_eval(self, theta, Q, D, gamma_row) -> _Eval | None:
        """Finish an evaluation from shifted/rescaled tables."""
        pr_scale = self._pr_scale(theta)
        if not np.isfinite(pr_scale):
            return None
        curves = self.ev.curves
        u = curves.invert_rows(Q, D, self.data.y)
        dens = curves.density_rows(D, u)
        if not np.all(np.isfinite(dens)) or np.any(dens < _DENSITY_FLOOR):
            return None
        marg = -float(np.sum(np.log(dens)))
        psi = self._psi(theta)
        z = self._z_from_u(u, psi)
        ss2, se2 = self._scales(theta)
        alpha = ss2 / (ss2 + se2)
        cop = self._cop(z, alpha, psi, self.phi_index)
        if not np.isfinite(marg + cop):
            return None
        return _Eval(Q, D, u, z, marg, cop, self.ev.pr_shape, pr_scale,
                     self.ev.pr_psi, gamma_row, ss2 + se2, curves)

    def _eval_loc(self, theta) -> _Eval | None:
        if self.n == 0:
            return _Eval(None, None, np.empty(0), np.empty(0), 0.0, 0.0,
                         self.ev.pr_shape, self.ev.pr_scale, self.ev.pr_psi,
                         None, self.ev.sigma2, self.ev.curves)
        gamma_row = self._get(theta, "gamma0")[0] + self.data.x @ self._get(theta, "gamma")
        shift = gamma_row - self.ev.gamma_row
        Q = self.ev.Q + shift[:, None]
        return self._tables_eval(theta, Q, self.ev.D, gamma_row)

    def _eval_scale(self, theta) -> _Eval | None:
        ss2, se2 = self._scales(theta)
        s2 = ss2 + se2
        if not np.isfinite(s2) or s2 <= 0:
            return None
        if self.n == 0:
            pr_scale = self._pr_scale(theta)
            if not np.isfinite(pr_scale):
                return None
            return _Eval(None, None, np.empty(0), np.empty(0), 0.0, 0.0,
                         self.ev.pr_shape, pr_scale, self.ev.pr_psi, None, s2,
                         self.ev.curves)
        r = np.sqrt(s2 / self.ev.sigma2)
        gr = self.ev.gamma_row
        Q = gr[:, None] + r * (self.ev.Q - gr[:, None])
        D = r * self.ev.D
        return self._tables_eval(theta, Q, D, gr)

    def _eval_alpha_only(self, theta) -> _Eval | None:
        """Mode-B spatial step: alpha changes, curves and u do not."""
        pr_scale = self._pr_scale(theta)
        if not np.isfinite(pr_scale):
            return None
        alpha = self._alpha(theta)
        psi = self._psi(theta)
        cop = self._cop(self.ev.z, alpha, psi, self.phi_index)
        if not np.isfinite(cop):
            return None
        return _Eval(self.ev.Q, self.ev.D, self.ev.u, self.ev.z, self.ev.marg,
                     cop, self.ev.pr_shape, pr_scale, self.ev.pr_psi,
                     self.ev.gamma_row, self.ev.sigma2, self.ev.curves)

    def _eval_psi(self, theta) -> _Eval | None:
        psi = self._psi(theta)
        pr_psi = self._pr_psi(theta)
        z = self._z_from_u(self.ev.u, psi) if self.n else np.empty(0)
        alpha = self._alpha(theta)
        cop = self._cop(z, alpha, psi, self.phi_index)
        if not np.isfinite(cop):
            return None
        return _Eval(self.ev.Q, self.ev.D, self.ev.u, z, self.ev.marg, cop,
                     self.ev.pr_shape, self.ev.pr_scale, pr_psi,
                     self.ev.gamma_row, self.ev.sigma2, self.ev.curves)

    # -- MH and Gibbs steps -------------------------------------------------------

    def _metropolis(self, block: _Block, evaluator, adapting: bool):
        theta2 = self.theta.copy()
        theta2[block.idx] += block.step(self.rng)
        ev2 = evaluator(theta2)
        block.n_prop += 1
        if ev2 is None or not np.isfinite(ev2.logpost):
            a_prob = 0.0
            block.track_neginf(True)
        else:
            log_r = ev2.logpost - self.ev.logpost
            a_prob = float(np.exp(min(0.0, log_r)))
            block.track_neginf(False)
            if np.log(self.rng.uniform()) < log_r:
                self.theta = theta2
                self.ev = ev2
                block.n_acc += 1
        if adapting:
            block.adapt_scale(a_prob)
            block.update_moments(self.theta[block.idx].copy())

    def _phi_step(self):
        if self.fix_alpha and not self.t_cop:
            self.phi_index = int(self.rng.integers(self.G))
            return
        alpha = self._alpha(self.theta)
        psi = self._psi(self.theta)
        table = np.array([
            self._cop(self.ev.z, alpha, psi, g) for g in range(self.G)
        ])
        gumb = self.rng.gumbel(size=self.G)
        idx = int(np.argmax(table + gumb))
        self.phi_index = idx
        self.ev.cop = float(table[idx])

    # -- main loop -------------------------------------------------------------

    def run(self) -> PosteriorDraws:
        cfg = self.cfg
        span = cfg.n_iter - cfg.burn_in
        retain = cfg.burn_in + ((np.arange(1, cfg.thin_to + 1) * span) // cfg.thin_to) - 1
        retain_set = set(int(v) for v in retain)
        T = cfg.thin_to
        rec = {
            "gamma0": np.empty(T), "gamma": np.empty((T, self.p)),
            "sigma_s2": np.empty(T), "sigma_e2": np.empty(T),
            "omega0": np.empty((T, self.m)), "omega": np.empty((T, self.p, self.m)),
            "kappa2": np.empty((T, self.p + 1)), "knot_corr": np.empty((T, self.p + 1)),
            "phi_index": np.empty(T, dtype=np.int64), "psi": np.full(T, np.nan),
            "base_dof": np.full(T, np.nan), "u": np.empty((T, self.n)),
            "loglik": np.empty(T),
        }
        scales_at_burnin: dict[str, float] = {}
        k = 0
        for it in range(cfg.n_iter):
            adapting = it < cfg.burn_in
            for block in self.step1:
                if not self._enabled(block.name):
                    continue
                ev = self._eval_loc if block.name == "loc" else self._full_eval
                self._metropolis(block, ev, adapting)
                if block.name == "all_marginal":
                    # the joint move carries most of the mixing; give it a
                    # second shot each cycle
                    self._metropolis(block, ev, adapting)
            if self.b_spatial is not None and self._enabled("spatial"):
                ev = self._eval_alpha_only if self.mode_b else self._eval_scale
                self._metropolis(self.b_spatial, ev, adapting)
            if self.b_psi is not None and self._enabled("psi"):
                self._metropolis(self.b_psi, self._eval_psi, adapting)
            if self._enabled("phi") and self.G > 0:
                self._phi_step()
            if self.b_joint is not None and self._enabled("joint_scale"):
                self._metropolis(self.b_joint, self._eval_scale, adapting)
            if it == cfg.burn_in - 1:
                scales_at_burnin = {b.name: b.scale for b in self.all_blocks}
            if (it + 1) % _REFRESH_EVERY == 0:
                refreshed = self._full_eval(self.theta)
                if refreshed is not None:
                    self.ev = refreshed
            if it in retain_set:
                self._record(rec, k)
                k += 1
        assert k == T
        diag = {
            "accept_rate": {
                b.name: (b.n_acc / b.n_prop if b.n_prop else np.nan)
                for b in self.all_blocks
            },
            "proposal_scale": {b.name: b.scale for b in self.all_blocks},
            "proposal_scale_at_burnin": scales_at_burnin,
            "phi_accept_rate": 1.0,
        }
        draws = PosteriorDraws(
            **rec,
            chain=np.zeros(T, dtype=np.int64),
            knots=self.knots.copy(),
            phi_grid=self.cache.phi_grid.copy(),
            nu=self.cache.nu,
            copula_family=cfg.copula_family,
            base_family=cfg.base_family,
            diagnostics=diag,
        )
        ess = {"gamma0": effective_sample_size(draws.gamma0)}
        for j in range(self.p):
            ess[f"gamma{j + 1}"] = effective_sample_size(draws.gamma[:, j])
        ess["sigma2"] = effective_sample_size(draws.sigma2)
        if not self.fix_alpha:
            ess["alpha"] = effective_sample_size(draws.alpha)
            ess["sigma_s2"] = effective_sample_size(draws.sigma_s2)
        ess["sigma_e2"] = effective_sample_size(draws.sigma_e2)
        if self.t_cop:
            ess["psi"] = effective_sample_size(draws.psi)
        if self.t_base:
            ess["base_dof"] = effective_sample_size(draws.base_dof)
        draws.diagnostics["ess"] = ess
        return draws

    def _record(self, rec, k):
        theta = self.theta
        ss2, se2 = self._scales(theta)
        om = self._omega_all(theta)
        rec["gamma0"][k] = self._get(theta, "gamma0")[0]
        rec["gamma"][k] = self._get(theta, "gamma")
        rec["sigma_s2"][k] = ss2
        rec["sigma_e2"][k] = se2
        rec["omega0"][k] = om[0]
        rec["omega"][k] = om[1:]
        rec["kappa2"][k] = np.exp(self._get(theta, "lk2"))
        rec["knot_corr"][k] = special.expit(self._get(theta, "lg"))
        rec["phi_index"][k] = self.phi_index
        if self.t_cop:
            rec["psi"][k] = self._psi(theta)
        if self.t_base:
            lo, hi = self.prior.base_dof_bounds
            rec["base_dof"][k] = lo + (hi - lo) * special.expit(
                float(self._get(theta, "ldof")[0])
            )
        rec["u"][k] = self.ev.u
        rec["loglik"][k] = self.ev.marg + self.ev.cop


def run_mcmc(
    dataset: Dataset,
    config: McmcConfig,
    prior: PriorSpec | None = None,
    cache: CorrelationCache | None = None,
) -> PosteriorDraws:
    """Run one chain and return the thinned post-burn-in draws."""
    if cache is None:
        raise ValueError("a correlation cache built on the dataset locations is required")
    return _Sampler(dataset, config, prior or PriorSpec(), cache).run()


def sample_phi_full_conditional(
    u,
    curve_params: QuantileCurveParams,
    copula_params: CopulaParams,
    cache: CorrelationCache,
    rng: np.random.Generator,
) -> int:
    """Exact draw of the decay-grid index from its discrete full conditional."""
    u = np.asarray(u, dtype=float)
    psi = copula_params.psi
    z = special.ndtri(u) if psi is None else special.stdtrit(psi, u)
    table = np.empty(cache.size)
    for g in range(cache.size):
        entry = cache.entry(g)
        if psi is None:
            table[g] = copulas.gaussian_copula_logdensity_z(z, copula_params.alpha, entry)
        else:
            table[g] = copulas.t_copula_logdensity_z(z, copula_params.alpha, psi, entry)
    return int(np.argmax(table + rng.gumbel(size=cache.size)))
