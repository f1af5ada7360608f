"""Score-based, boundary-robust inference for variance and covariance
parameters of Gaussian linear mixed models.

Submodules: model (parameterization and Sigma algebra), inference (scores,
information, statistics), reml (restricted-likelihood reduction), bounds
(normal-approximation diagnostics), crossed (crossed-design spectral paths),
estimation (constrained ML/REML), regions (confidence regions), kernels
(structured fast paths), simulation (Monte Carlo harnesses), plotting, cli.
"""

from .model import (
    CovarianceStructure,
    DimensionError,
    LmmDesign,
    Parameter,
    SingularCovarianceError,
    build_psi,
    build_sigma,
    check_parameter,
    design_from_json,
    design_to_json,
    load_design,
    save_design,
    whiten,
)
from .inference import (
    ScoreReport,
    SingularInformationError,
    StatisticKind,
    fisher_information,
    gls_beta,
    information_positive_definite,
    log_likelihood,
    lrt_statistic,
    profile_score_statistic,
    score,
    score_statistic,
    wald_statistic,
)
from .reml import (
    RemlTransform,
    null_basis,
    reml_reduce,
    reml_transform,
    restricted_log_likelihood,
    restricted_score_statistic,
)
from .bounds import (
    ApproximationBound,
    a_ratio,
    a_tilde_direction,
    cluster_bound,
    crossed_bound,
    density_bound_from_a,
    separable_bound,
    sup_a_estimate,
)
from .crossed import (
    CrossedLayout,
    SpectralBasis,
    build_crossed_design,
    crossed_spectrum,
    spectral_basis,
)
from .estimation import (
    FitOptions,
    FitResult,
    example1_stats,
    fit_ml,
    fit_reml,
    single_variance_stats_from_moment,
)
from .regions import (
    RegionGrid,
    RegionSpec,
    chi2_quantile,
    evaluate_statistic,
    region_grid,
    region_membership,
)
from .simulation import (
    CoverageTable,
    Scenario,
    coverage_experiment,
    proposition1_comparison,
    quantile_curves,
    simulate_dataset,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
