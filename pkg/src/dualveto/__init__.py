"""Dual-gate selective classification triage.

Calibrates a probabilistic gate (class-conditional split conformal
prediction on temperature-scaled ensemble probabilities) and a geometric
gate (multi-centroid Mahalanobis distances under a shared shrunk
precision matrix) on a validation split, then triages test records into
ClearNegative, ClearPositive or Defer and evaluates the result with
risk-aware metrics and bootstrap confidence intervals.
"""

__version__ = "0.1.0"

from .artifact import CalibrationArtifact, FitConfig, fit_artifact, load_artifact, save_artifact
from .conformal import ConformalCalibrator, PredictionSet, class_quantile, fit_conformal, prediction_set
from .dataset_io import Cohort, Record, aggregate_members, load_cohort, reference_embedding, save_cohort
from .geometry import (
    GeometricModel,
    KMeansResult,
    fit_covariance,
    fit_geometry,
    fit_thresholds,
    kmeans,
    l2_normalize,
    mahalanobis_min,
    select_k,
)
from .metrics import (
    DEFAULT_PENALTIES,
    PENALTY_PRESETS,
    MetricsReport,
    PenaltyMatrix,
    aurc,
    bootstrap,
    coverage_tpdr,
    ece,
    evaluate,
    f_beta,
    risk_kappa,
)
from .policy import PolicyConfig, TriageDecision, decide, triage_cohort
from .synthgen import SynthConfig, generate, generate_files
from .temperature import TemperatureModel, apply_temperature, fit_temperature

__all__ = [
    "CalibrationArtifact",
    "Cohort",
    "ConformalCalibrator",
    "DEFAULT_PENALTIES",
    "FitConfig",
    "GeometricModel",
    "KMeansResult",
    "MetricsReport",
    "PENALTY_PRESETS",
    "PenaltyMatrix",
    "PolicyConfig",
    "PredictionSet",
    "Record",
    "SynthConfig",
    "TemperatureModel",
    "TriageDecision",
    "aggregate_members",
    "apply_temperature",
    "aurc",
    "bootstrap",
    "class_quantile",
    "coverage_tpdr",
    "decide",
    "ece",
    "evaluate",
    "f_beta",
    "fit_artifact",
    "fit_conformal",
    "fit_covariance",
    "fit_geometry",
    "fit_temperature",
    "fit_thresholds",
    "generate",
    "generate_files",
    "kmeans",
    "l2_normalize",
    "load_artifact",
    "load_cohort",
    "mahalanobis_min",
    "prediction_set",
    "reference_embedding",
    "risk_kappa",
    "save_artifact",
    "save_cohort",
    "select_k",
    "triage_cohort",
]
