"""Covariate-assisted principal regression for high-dimensional covariance
matrices, with a shared-coefficient linear shrinkage estimator."""

__version__ = "0.1.0"

from .core import (
    CovKind,
    CovarianceSet,
    ProjectionState,
    Study,
    SubjectData,
    center_study,
    pooled_covariance,
    projected_variances,
    sample_covariance,
    sample_covariance_set,
    validate_study,
)
from .inference import BootstrapResult, bootstrap_beta
from .shrinkage import (
    OracleCombination,
    ShrinkageParams,
    combination_loss,
    cs_shrink,
    estimate_shrinkage_params,
    lw_shrink,
    lw_shrink_set,
    oracle_combination,
)
from .simgen import (
    GroundTruth,
    SimCell,
    SimDesign,
    SimMetrics,
    consistency_curve,
    coverage_experiment,
    generate_study,
    run_table1,
    run_table2_and_figures,
    similarity,
)
from .solver import (
    ComponentFit,
    ComponentSet,
    Estimator,
    FitConfig,
    dfd,
    fit_beta_given_gamma,
    fit_component,
    fit_components,
    objective,
    unit_normalized,
    update_beta,
    update_gamma,
)

__all__ = [name for name in dir() if not name.startswith("_")]
