"""Mondrian (class-conditional) split conformal prediction for two classes.

Nonconformity of a calibration sample is 1 minus the calibrated
probability of its true label, stratified by that label. At risk level
alpha, class c enters the prediction set when 1 - p_c does not exceed
the finite-sample quantile of class c's calibration scores. Cardinality
0 or 2 flags ambiguity; cardinality 1 permits automation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlphaOutOfRange, MissingClassInCalibration

# slop for detecting integer-valued ranks computed in floating point
_RANK_EPS = 1e-9


@dataclass(frozen=True)
class PredictionSet:
    members: frozenset[int]

    @property
    def cardinality(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ConformalCalibrator:
    """Ascending per-class nonconformity scores from a validation set."""

    scores: tuple[np.ndarray, np.ndarray]

    @property
    def counts(self) -> tuple[int, int]:
        return (len(self.scores[0]), len(self.scores[1]))


def fit_conformal(probs: np.ndarray, labels: np.ndarray) -> ConformalCalibrator:
    """Store sorted scores s = 1 - p_true stratified by the true label."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    per_class = []
    for c in (0, 1):
        mask = labels == c
        if not mask.any():
            raise MissingClassInCalibration(f"no calibration samples with label {c}")
        s = 1.0 - probs[mask, c]
        per_class.append(np.sort(s))
    return ConformalCalibrator(scores=(per_class[0], per_class[1]))


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 1.0):
        raise AlphaOutOfRange(f"alpha must be in (0, 1), got {alpha}")


def class_quantile(cal: ConformalCalibrator, c: int, alpha: float) -> float:
    """Finite-sample score threshold for class c at risk level alpha.

    Returns the ceil((n_c + 1)(1 - alpha))-th smallest calibration score
    of class c, or +inf when that rank exceeds n_c (the class is then
    always included).
    """
    _check_alpha(alpha)
    scores = cal.scores[c]
    n = len(scores)
    rank = math.ceil((n + 1) * (1.0 - alpha) - _RANK_EPS)
    rank = max(rank, 1)
    if rank > n:
        return math.inf
    return float(scores[rank - 1])


def prediction_set(cal: ConformalCalibrator, probs: np.ndarray, alpha: float) -> PredictionSet:
    """Labels whose nonconformity clears their class threshold."""
    _check_alpha(alpha)
    members = frozenset(
        c for c in (0, 1) if (1.0 - float(probs[c])) <= class_quantile(cal, c, alpha)
    )
    return PredictionSet(members=members)


def set_membership(cal: ConformalCalibrator, probs: np.ndarray, alpha: float) -> np.ndarray:
    """Vectorized prediction sets: (n, 2) boolean membership matrix."""
    _check_alpha(alpha)
    probs = np.asarray(probs, dtype=np.float64)
    out = np.empty((len(probs), 2), dtype=bool)
    for c in (0, 1):
        out[:, c] = (1.0 - probs[:, c]) <= class_quantile(cal, c, alpha)
    return out
