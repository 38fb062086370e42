"""Trinary triage decisions from the calibrated gates.

The hybrid policy automates a record only when the conformal prediction
set is a singleton AND the minimum Mahalanobis distance to the predicted
class's centroids is within that class's threshold; failing either gate
defers to manual review with a reason code. Single-gate variants and an
entropy-percentile baseline are provided for ablations. The gates veto,
they never relabel: a Clear outcome always carries the argmax of the
calibrated probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import conformal as _conformal
from . import geometry as _geometry
from .dataset_io import Cohort, aggregate_members, reference_embeddings
from .errors import ConfigMismatch, UnfittedCalibrator

if TYPE_CHECKING:  # pragma: no cover
    from .artifact import CalibrationArtifact

POLICY_KINDS = ("hybrid", "aleatoric_only", "epistemic_only", "standard_uncertainty")

CLEAR_NEGATIVE = "ClearNegative"
CLEAR_POSITIVE = "ClearPositive"
DEFER = "Defer"

REASON_AMBIGUOUS = "AmbiguousSet"
REASON_OOD = "GeometricOOD"
REASON_BOTH = "Both"


@dataclass(frozen=True)
class PolicyConfig:
    alpha: float = 0.05
    percentile: float = 99.0
    inertia_threshold: float = 0.05
    policy_kind: str = "hybrid"
    standard_uncertainty_percentile: float = 90.0

    def validate(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ConfigMismatch(f"alpha must be in (0, 1), got {self.alpha}")
        if not (0.0 < self.percentile <= 100.0):
            raise ConfigMismatch(f"percentile must be in (0, 100], got {self.percentile}")
        if self.policy_kind not in POLICY_KINDS:
            raise ConfigMismatch(f"unknown policy kind {self.policy_kind!r}")


@dataclass(frozen=True)
class TriageDecision:
    outcome: str                   # ClearNegative | ClearPositive | Defer
    reason: str | None             # set for Defer only
    set_cardinality: int
    d_m: float
    tau: float
    predicted_class: int
    confidence: float
    entropy: float


def _entropy_threshold(artifact: "CalibrationArtifact", percentile: float) -> float:
    if artifact.val_entropies is None or len(artifact.val_entropies) == 0:
        raise UnfittedCalibrator("no validation entropies stored in the artifact")
    return float(np.percentile(artifact.val_entropies, percentile, method="linear"))


def _check_artifact(artifact: "CalibrationArtifact", config: PolicyConfig) -> None:
    if artifact.conformal is None:
        raise UnfittedCalibrator("conformal calibrator missing from artifact")
    needs_geometry = config.policy_kind in ("hybrid", "epistemic_only")
    if needs_geometry and artifact.geometry is None:
        raise ConfigMismatch(
            f"policy {config.policy_kind!r} needs a geometric model but none is fitted"
        )


def decide(
    probs: np.ndarray,
    embedding: np.ndarray,
    artifact: "CalibrationArtifact",
    config: PolicyConfig,
) -> TriageDecision:
    """Triage one record from its calibrated probabilities and embedding."""
    config.validate()
    _check_artifact(artifact, config)
    probs = np.asarray(probs, dtype=np.float64)
    yhat = int(np.argmax(probs))
    confidence = float(probs[yhat])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    entropy = float(-terms.sum())

    pset = _conformal.prediction_set(artifact.conformal, probs, config.alpha)
    if artifact.geometry is not None:
        d_m = _geometry.mahalanobis_min(embedding, yhat, artifact.geometry)
        tau = artifact.geometry.require_thresholds()[yhat]
    else:
        d_m, tau = float("nan"), float("nan")

    aleatoric_ok = pset.cardinality == 1
    epistemic_ok = d_m <= tau

    kind = config.policy_kind
    if kind == "hybrid":
        clear = aleatoric_ok and epistemic_ok
        if clear:
            reason = None
        elif not aleatoric_ok and not epistemic_ok:
            reason = REASON_BOTH
        elif not aleatoric_ok:
            reason = REASON_AMBIGUOUS
        else:
            reason = REASON_OOD
    elif kind == "aleatoric_only":
        clear = aleatoric_ok
        reason = None if clear else REASON_AMBIGUOUS
    elif kind == "epistemic_only":
        clear = epistemic_ok
        reason = None if clear else REASON_OOD
    else:  # standard_uncertainty: entropy against the validation percentile
        threshold = _entropy_threshold(artifact, config.standard_uncertainty_percentile)
        clear = entropy <= threshold
        reason = None if clear else REASON_AMBIGUOUS

    outcome = (CLEAR_POSITIVE if yhat == 1 else CLEAR_NEGATIVE) if clear else DEFER
    return TriageDecision(
        outcome=outcome,
        reason=reason,
        set_cardinality=pset.cardinality,
        d_m=d_m,
        tau=tau,
        predicted_class=yhat,
        confidence=confidence,
        entropy=entropy,
    )


def triage_cohort(
    cohort: Cohort,
    artifact: "CalibrationArtifact",
    config: PolicyConfig,
) -> list[tuple[str, TriageDecision]]:
    """One decision per test id, ordered by id.

    Aggregation, prediction sets and distances are computed in batch;
    the output matches calling decide record by record up to
    floating-point round-off (1e-9) on the distance evidence.
    """
    config.validate()
    _check_artifact(artifact, config)
    mask = cohort.split_mask("test")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []

    probs_all, entropy_all = aggregate_members(cohort, artifact.temperature_map())
    probs = probs_all[idx]
    entropy = entropy_all[idx]
    embeddings = _geometry.l2_normalize_rows(reference_embeddings(cohort, idx))
    yhat = np.argmax(probs, axis=1)
    confidence = probs[np.arange(len(idx)), yhat]

    membership = _conformal.set_membership(artifact.conformal, probs, config.alpha)
    cardinality = membership.sum(axis=1)
    if artifact.geometry is not None:
        d_m = _geometry.mahalanobis_min_batch(embeddings, yhat, artifact.geometry)
        taus = np.asarray(artifact.geometry.require_thresholds())[yhat]
    else:
        d_m = np.full(len(idx), np.nan)
        taus = np.full(len(idx), np.nan)

    aleatoric_ok = cardinality == 1
    epistemic_ok = d_m <= taus
    kind = config.policy_kind
    if kind == "hybrid":
        clear = aleatoric_ok & epistemic_ok
    elif kind == "aleatoric_only":
        clear = aleatoric_ok
    elif kind == "epistemic_only":
        clear = epistemic_ok
    else:
        threshold = _entropy_threshold(artifact, config.standard_uncertainty_percentile)
        clear = entropy <= threshold

    out: list[tuple[str, TriageDecision]] = []
    for row, i in enumerate(idx):
        if clear[row]:
            reason = None
            outcome = CLEAR_POSITIVE if yhat[row] == 1 else CLEAR_NEGATIVE
        else:
            outcome = DEFER
            if kind == "hybrid":
                if not aleatoric_ok[row] and not epistemic_ok[row]:
                    reason = REASON_BOTH
                elif not aleatoric_ok[row]:
                    reason = REASON_AMBIGUOUS
                else:
                    reason = REASON_OOD
            elif kind == "epistemic_only":
                reason = REASON_OOD
            else:
                reason = REASON_AMBIGUOUS
        out.append(
            (
                cohort.ids[i],
                TriageDecision(
                    outcome=outcome,
                    reason=reason,
                    set_cardinality=int(cardinality[row]),
                    d_m=float(d_m[row]),
                    tau=float(taus[row]),
                    predicted_class=int(yhat[row]),
                    confidence=float(confidence[row]),
                    entropy=float(entropy[row]),
                ),
            )
        )
    return out
