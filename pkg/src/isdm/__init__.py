"""Integrated species distribution modeling on triangulated domains.

A latent log-Gaussian Cox process drives every dataset; counts,
detection/non-detection records, presence-only points and regional
lists each attach through their own observation model and are fitted
jointly by penalized maximum likelihood with curvature-based
uncertainty.
"""

from .errors import (
    ConfigError,
    DataError,
    EngineError,
    MeshError,
    NumericsError,
    OutsideDomainError,
    SpecError,
)
from .mesh import (
    MeshLocation,
    Point2D,
    TriangulatedDomain,
    build_mesh,
    interpolate,
    locate,
)
from .random_field import (
    FieldPrior,
    FieldRealization,
    MaternParams,
    build_dense_covariance,
    build_sparse_precision,
    fem_matrices,
    field_log_density,
    kappa_for_range,
    log_tau_for_variance,
    marginal_variance,
    matern_correlation,
    sample_field,
)
from .process import (
    CovariateField,
    LinearPredictor,
    ProcessModel,
    RangeMapTerm,
    eval_linear_predictor,
    intensity,
    occupancy_probability,
    range_covariate,
    region_mean,
    region_membership,
)
from .observation import (
    CountDataset,
    ObservationParams,
    OccupancyDataset,
    PresenceOnlyDataset,
    RegionalListDataset,
    count_loglik,
    occupancy_loglik,
    po_loglik_direct,
    po_loglik_quadrature,
    regional_list_loglik,
    thinning_link,
)
from .inference import (
    DatasetBinding,
    FieldComponent,
    FitOptions,
    FitResult,
    ModelSpec,
    ParameterVector,
    PredictionGrid,
    PriorConfig,
    compose_case_study_spec,
    decompose_negloglik,
    default_init,
    fit_map,
    gradient,
    joint_negloglik,
    laplace_standard_errors,
    predict_grid,
)
from .simulate import (
    SimulatedSuite,
    simulate_counts,
    simulate_lgcp,
    simulate_occupancy,
    simulate_regional,
    simulate_suite,
    thin_pattern,
    uniform_sites,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "EngineError",
    "MeshError",
    "NumericsError",
    "OutsideDomainError",
    "SpecError",
    "MeshLocation",
    "Point2D",
    "TriangulatedDomain",
    "build_mesh",
    "interpolate",
    "locate",
    "FieldPrior",
    "FieldRealization",
    "MaternParams",
    "build_dense_covariance",
    "build_sparse_precision",
    "fem_matrices",
    "field_log_density",
    "kappa_for_range",
    "log_tau_for_variance",
    "marginal_variance",
    "matern_correlation",
    "sample_field",
    "CovariateField",
    "LinearPredictor",
    "ProcessModel",
    "RangeMapTerm",
    "eval_linear_predictor",
    "intensity",
    "occupancy_probability",
    "range_covariate",
    "region_mean",
    "region_membership",
    "CountDataset",
    "ObservationParams",
    "OccupancyDataset",
    "PresenceOnlyDataset",
    "RegionalListDataset",
    "count_loglik",
    "occupancy_loglik",
    "po_loglik_direct",
    "po_loglik_quadrature",
    "regional_list_loglik",
    "thinning_link",
    "DatasetBinding",
    "FieldComponent",
    "FitOptions",
    "FitResult",
    "ModelSpec",
    "ParameterVector",
    "PredictionGrid",
    "PriorConfig",
    "compose_case_study_spec",
    "decompose_negloglik",
    "default_init",
    "fit_map",
    "gradient",
    "joint_negloglik",
    "laplace_standard_errors",
    "predict_grid",
    "simulate_counts",
    "simulate_lgcp",
    "SimulatedSuite",
    "simulate_occupancy",
    "simulate_regional",
    "simulate_suite",
    "thin_pattern",
    "uniform_sites",
]
