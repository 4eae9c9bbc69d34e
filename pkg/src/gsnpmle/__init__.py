"""Gamma-smoothed NPMLE for Poisson empirical Bayes."""

from ._backend import NAME as backend
from .coverage import (
    CoverageRule,
    IntervalUnion,
    PreconditionError,
    build_rule,
    contains,
    estimate_threshold,
    exact_coverage,
    garwood_interval,
    level_set,
    rule_from_json,
    rule_to_json,
)
from .mixture import (
    CountSample,
    EvaluationError,
    GammaMixtureModel,
    MixingMeasure,
    alpha_star,
    load_model,
    marginal_pmf,
    model_from_json,
    model_to_json,
    nb_log_kernel,
    posterior_density,
    posterior_log_density,
    posterior_mean,
    prior_density,
    save_model,
)
from .npmle import FitDiagnostics, NonConvergenceError, SolverConfig, fit_npmle, optimality_gap
from .rng import Rng
from .shape import KappaConfig, cv_select_eta, dkw_eta, estimate_kappa, ks_distance, min_ks_fit
from .special import chi_square_quantile, log_gamma, reg_lower_gamma

__version__ = "0.1.0"
