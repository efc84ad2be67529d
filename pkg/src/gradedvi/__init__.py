"""Confirmatory graded-response item factor analysis by amortized
importance-weighted variational inference, with classifier two-sample
goodness-of-fit tests, a classifier-based relative fit index, and
permutation-importance item diagnostics."""

from .c2st import (
    C2STOutcome,
    RFIOutcome,
    accuracy,
    approx_pvalue,
    build_split,
    c2st_from_samples,
    count_parameters,
    exact_pvalue,
    knn_fit_predict,
    nn_fit_predict,
    permutation_importance,
    power,
    rfi,
    run_c2st,
    run_rfi,
)
from .correlation import build_correlation, identity_angles, lower_cholesky
from .encoder import InferenceNet, log_q, reparameterize
from .estimator import (
    FitConfig,
    FitResult,
    NumericalDivergenceError,
    fit,
    init_params,
    iw_elbo_estimate,
)
from .grm import (
    BaselineModel,
    GRMSampler,
    ItemParams,
    apply_constraints,
    boundary_probs,
    category_probs,
    log_cond_likelihood,
    sample_baseline,
    sample_responses,
    zero_factor_mle,
)
from .modelspec import ModelSpec, SpecError, from_pattern, simple_structure, zero_factor

__version__ = "0.1.0"
