"""Instrumental-variable estimation of structural cumulative survival models.

Estimates the cumulative causal hazards-difference curve of a time-varying
binary treatment on a survival outcome, using randomization as the
instrument to correct for selective treatment switching. Ships the recursive
estimator, influence-function variance estimation, wild-multiplier sup tests,
a trial simulator with a Monte Carlo driver, and a CSV-based command line.
"""

__version__ = "0.1.0"

from .data import (
    EventTable,
    SubjectRecord,
    TreatmentPath,
    build_event_table,
    treatment_at,
    treatment_before,
    validate_subjects,
)
from .errors import (
    DegenerateInstrument,
    EstimationError,
    NoEvents,
    NonConvergence,
    ScsmivError,
    SingularDenominator,
    ValidationError,
    ZeroWeight,
)
from .estimator import (
    ConstantEffect,
    CumulativeEffect,
    estimate_constant_effect,
    estimate_cumulative_effect,
    estimating_equation_residual,
    event_weights,
)
from .inference import (
    InfluenceMatrix,
    TestReport,
    VarianceCurve,
    constant_effect_se,
    influence_contrasts,
    influence_functions,
    multiplier_resample,
    test_causal_null,
    test_constant_effect,
    variance_curve,
)
from .ivmodel import IvModel, center_instrument, fit_iv_model
from .simulate import (
    MonteCarloReport,
    SimConfig,
    blip_consistency_check,
    run_monte_carlo,
    simulate_trial,
    true_cumulative_effect,
)
from .analysis import (
    AnalysisConfig,
    AnalysisReport,
    parse_dataset,
    run_analysis,
)

__all__ = [
    "AnalysisConfig",
    "AnalysisReport",
    "ConstantEffect",
    "CumulativeEffect",
    "DegenerateInstrument",
    "EstimationError",
    "EventTable",
    "InfluenceMatrix",
    "IvModel",
    "MonteCarloReport",
    "NoEvents",
    "NonConvergence",
    "ScsmivError",
    "SimConfig",
    "SingularDenominator",
    "SubjectRecord",
    "TestReport",
    "TreatmentPath",
    "ValidationError",
    "VarianceCurve",
    "ZeroWeight",
    "blip_consistency_check",
    "build_event_table",
    "center_instrument",
    "constant_effect_se",
    "estimate_constant_effect",
    "estimate_cumulative_effect",
    "estimating_equation_residual",
    "event_weights",
    "fit_iv_model",
    "influence_contrasts",
    "influence_functions",
    "multiplier_resample",
    "parse_dataset",
    "run_analysis",
    "run_monte_carlo",
    "simulate_trial",
    "test_causal_null",
    "test_constant_effect",
    "treatment_at",
    "treatment_before",
    "true_cumulative_effect",
    "validate_subjects",
    "variance_curve",
]
