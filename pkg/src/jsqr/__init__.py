"""Joint spatial quantile regression.

Simultaneous estimation of all conditional quantile curves under a
non-crossing parametrization, with spatial dependence between observations
modeled by a Gaussian or t copula process on latent quantile levels.
"""

from .copulas import (
    CopulaParams,
    LatentField,
    conditional_quantile_gaussian,
    conditional_quantile_t,
    gaussian_copula_logdensity,
    h_map,
    recover_latents,
    t_copula_logdensity,
)
from .curves import (
    BaseDistribution,
    CoefficientCurves,
    LogisticBase,
    QuantileCurveParams,
    StudentTBase,
    build_coefficient_curves,
    invert_quantile,
    make_base,
    projection_radius,
    quantile_density,
    quantile_value,
    zeta_transform,
)
from .kernels import (
    CorrelationCache,
    KernelSpec,
    build_correlation_cache,
    effective_range,
    matern_correlation,
    phi_grid_from_effective_range,
    se_correlation,
)
from .inference import (
    CurveSummary,
    PredictionRequest,
    PredictionSummary,
    WaicReport,
    check_loss,
    compute_waic,
    predict_batch,
    predict_conditional_quantile,
    summarize_curves,
)
from .likelihood import (
    Dataset,
    log_likelihood,
    log_likelihood_from_curves,
    per_observation_loglik,
)
from .mcmc import (
    HyperParams,
    McmcAbort,
    McmcConfig,
    PosteriorDraws,
    PriorSpec,
    effective_sample_size,
    log_prior,
    run_mcmc,
    sample_phi_full_conditional,
)
from .simgen import (
    DEFAULT_SUMMARY_TAUS,
    ScenarioSpec,
    SimulatedData,
    generate,
    true_quantile,
    truth_marginal,
)

__version__ = "0.1.0"
