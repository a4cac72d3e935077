"""Multi-group ordinal factor analysis with anchor-based partial invariance.

Library + CLI for comparing latent group means measured by ordinal survey
items: full-information marginal maximum likelihood, invariance ladders,
threshold-difference diagnostics, factor scores, structural regression on
the trait, and a Monte Carlo harness for estimator bias under threshold
shifts.
"""

from .analysis import (
    AnalysisError,
    PolicyEffect,
    ThresholdDiffTable,
    eap_scores,
    latent_gap,
    structural_effect,
    threshold_differences,
)
from .estimation import (
    EstimationError,
    FitResult,
    LrtResult,
    NonConvergenceError,
    chisq_sf,
    fit,
    lrt,
    standard_errors,
)
from .invariance import (
    InvarianceError,
    LadderResult,
    build_partial_spec,
    run_anchor_validation,
    run_invariance_ladder,
)
from .likelihood import (
    LikelihoodError,
    QuadratureRule,
    category_probability,
    respondent_loglik,
    total_loglik,
)
from .model import (
    CONFIGURAL,
    CONSTRAINT_LEVELS,
    ConstraintSet,
    DatasetValidationError,
    Item,
    METRIC,
    ModelError,
    ModelSpec,
    OrdinalDataset,
    PARTIAL_SCALAR_ANCHOR,
    ParameterSet,
    SCALAR,
    SCALAR_FV,
    StructuralParams,
    build_constraints,
    validate_dataset,
)
from .simulation import (
    SimCondition,
    SimulationError,
    SimulationReport,
    default_grid,
    desk_grid,
    estimate_full_scalar,
    estimate_partial_anchor,
    estimate_scale,
    generate_demo_dataset,
    generate_replication,
    run_grid,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
