"""Gaussian-copula imputation for three-order multivariate time series.

The pipeline: unfold each sample's (time x feature) slice into one long row,
push every column through an empirical-CDF normal transform, estimate the
latent correlation by EM over the partially observed rows, fill missing
coordinates with conditional means, and invert the transform.
"""

from .benchmark import (
    BenchmarkReport,
    Metrics,
    SyntheticSpec,
    baseline_locf,
    baseline_mean,
    compare_to_reference,
    compute_metrics,
    generate_synthetic,
    run_benchmark,
)
from .data import (
    ColumnKind,
    ColumnSpec,
    Layout,
    MtsTensor,
    StandardizationParams,
    UnfoldedMatrix,
    destandardize,
    load_csv_long,
    mask_mcar,
    refold,
    standardize,
    unfold,
    unfold_timewise,
    write_csv_long,
)
from .emfit import (
    CorrelationModel,
    EmConfig,
    FitDiagnostics,
    conditional_dist,
    e_step,
    fit_em,
    init_sigma,
    m_step,
    observed_loglik,
    scale_to_correlation,
)
from .errors import (
    BoundsError,
    ConfigError,
    ConflictError,
    ContractError,
    DomainError,
    FitError,
    NumericalError,
    ParseError,
    ShapeError,
    TgcImputeError,
)
from .kernels import available_backends, get_backend
from .marginals import (
    EmpiricalMarginal,
    FallbackMarginal,
    MarginalSet,
    OrdinalMarginal,
    fit_marginal,
    fit_marginal_set,
    from_latent,
    std_normal_cdf,
    std_normal_quantile,
    to_latent,
)
from .model import (
    ImputationResult,
    TgcModel,
    fit,
    fit_impute,
    impute,
    load_model,
    save_model,
)

__version__ = "0.1.0"
