import numpy as np
import pytest

from jsqr.kernels import build_correlation_cache, phi_grid_from_effective_range
from jsqr.mcmc import McmcConfig, PriorSpec, run_mcmc
from jsqr.simgen import ScenarioSpec, generate


@pytest.fixture(scope="session")
def ex1_sim():
    """One spatially dependent simple-regression dataset with held-out points."""
    return generate(ScenarioSpec(marginal="example1", copula="gaussian",
                                 n=150, n_test=30, alpha=0.7, phi=0.3, seed=101))


@pytest.fixture(scope="session")
def ex1_cache(ex1_sim):
    grid = phi_grid_from_effective_range(ex1_sim.train.s, 2.0, 8)
    return build_correlation_cache(ex1_sim.train.s, 2.0, grid)


@pytest.fixture(scope="session")
def ex1_fit(ex1_sim, ex1_cache):
    cfg = McmcConfig(n_iter=1600, burn_in=800, thin_to=200, rng_seed=202)
    return run_mcmc(ex1_sim.train, cfg, PriorSpec(), ex1_cache)


@pytest.fixture(scope="session")
def ex1_fit_indep(ex1_sim, ex1_cache):
    cfg = McmcConfig(n_iter=1600, burn_in=800, thin_to=200, rng_seed=203,
                     fix_alpha_zero=True)
    return run_mcmc(ex1_sim.train, cfg, PriorSpec(), ex1_cache)
