"""Risk-aware evaluation of forced-binary and post-deferral predictions.

Binary metrics score the argmax prediction on every labeled test record;
Clear metrics restrict to records the policy automated. All headline
numbers carry 95% empirical bootstrap intervals (percentile method,
N-out-of-N resampling) that are bit-reproducible for a given seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateExpectedCost,
    EmptyEvaluationSet,
    NoPositiveEvidence,
    NoPositiveRecords,
    TooFewRecords,
    UndefinedMetric,
)

# trinary outcome codes, ordered to match penalty-matrix columns
CLEAR_POSITIVE = 0
DEFER = 1
CLEAR_NEGATIVE = 2

OUTCOME_NAMES = {CLEAR_POSITIVE: "ClearPositive", DEFER: "Defer", CLEAR_NEGATIVE: "ClearNegative"}
OUTCOME_CODES = {v: k for k, v in OUTCOME_NAMES.items()}


@dataclass(frozen=True)
class PenaltyMatrix:
    """2x3 cost matrix: rows (true positive, true negative), columns
    (ClearPositive, Defer, ClearNegative)."""

    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != (2, 3):
            raise ValueError("penalty matrix must be 2x3")
        if np.any(w < 0):
            raise ValueError("penalties must be non-negative")
        if w[0, 0] != 0.0 or w[1, 2] != 0.0:
            raise ValueError("correct automations must carry zero penalty")
        object.__setattr__(self, "w", w)

    @classmethod
    def from_weights(cls, fn: float, fp: float, def_tn: float, def_tp: float) -> "PenaltyMatrix":
        return cls(np.array([[0.0, def_tp, fn], [fp, def_tn, 0.0]]))

    @property
    def weights(self) -> dict[str, float]:
        return {
            "fn": float(self.w[0, 2]),
            "fp": float(self.w[1, 0]),
            "def_tn": float(self.w[1, 1]),
            "def_tp": float(self.w[0, 1]),
        }


DEFAULT_PENALTIES = PenaltyMatrix.from_weights(fn=1.0, fp=0.5, def_tn=0.25, def_tp=0.5)

# named health-economic scenarios for the kappa sensitivity command
PENALTY_PRESETS: dict[str, PenaltyMatrix] = {
    "zero_cost_deferral": PenaltyMatrix.from_weights(1.0, 1.0, 0.0, 0.0),
    "extreme_epidemiological": PenaltyMatrix.from_weights(1.0, 0.25, 0.1, 0.25),
    "default": DEFAULT_PENALTIES,
    "symmetric_control": PenaltyMatrix.from_weights(1.0, 1.0, 0.5, 0.5),
    "high_admin_burden": PenaltyMatrix.from_weights(1.0, 0.75, 0.5, 0.75),
}

PRESET_TITLES = {
    "zero_cost_deferral": "Zero-Cost Deferral",
    "extreme_epidemiological": "Extreme Epidemiological",
    "default": "Default Baseline",
    "symmetric_control": "Symmetric Control",
    "high_admin_burden": "High Admin Burden",
}


def f_beta(tp: float, fp: float, fn: float, beta: float = 2.0) -> float:
    """F-beta from counts; beta > 1 weighs recall (missed positives) more."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("counts must be non-negative")
    if tp + fp + fn == 0:
        raise NoPositiveEvidence("no true positives, false positives or false negatives")
    b2 = beta * beta
    return float((1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * fn + fp))


def ece(
    confidences: np.ndarray,
    predicted: np.ndarray,
    labels: np.ndarray,
    n_bins: int = 10,
) -> float:
    """Expected calibration error with equal-width confidence bins on [0, 1]."""
    confidences = np.asarray(confidences, dtype=np.float64)
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    n = len(confidences)
    if n == 0:
        raise EmptyEvaluationSet("no records to score calibration on")
    if np.any((confidences < 0) | (confidences > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    correct = (predicted == labels).astype(np.float64)
    bins = np.clip((confidences * n_bins).astype(np.intp), 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = bins == b
        n_b = int(mask.sum())
        if n_b == 0:
            continue
        total += (n_b / n) * abs(correct[mask].mean() - confidences[mask].mean())
    return float(total)


def coverage_tpdr(outcomes: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Fraction automated, and fraction of true positives deferred."""
    outcomes = np.asarray(outcomes)
    labels = np.asarray(labels)
    if len(outcomes) == 0:
        raise EmptyEvaluationSet("no decisions to evaluate")
    clear = outcomes != DEFER
    coverage = float(clear.mean())
    pos = labels == 1
    if not pos.any():
        raise NoPositiveRecords("no positive records; TPDR undefined")
    tpdr = float(((outcomes == DEFER) & pos).sum() / pos.sum())
    return coverage, tpdr


def aurc(confidences: np.ndarray, correct: np.ndarray) -> float:
    """Area under the risk-coverage curve of a confidence ranking.

    Records are sorted by descending confidence (stable ties); risk at
    coverage k/N is the error rate among the top k, and the area is the
    mean risk over k = 1..N.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    n = len(confidences)
    if n == 0:
        raise EmptyEvaluationSet("no records for the risk-coverage curve")
    order = np.argsort(-confidences, kind="stable")
    errors = np.cumsum(~correct[order])
    risks = errors / np.arange(1, n + 1)
    return float(risks.mean())


def risk_kappa(
    outcomes: np.ndarray, labels: np.ndarray, penalties: PenaltyMatrix = DEFAULT_PENALTIES
) -> float:
    """Chance-corrected agreement 1 - O_cost / E_cost under the penalty matrix.

    O is the observed (true label x decision) proportion matrix and E
    the independence product of its marginals.
    """
    outcomes = np.asarray(outcomes, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    n = len(outcomes)
    if n == 0:
        raise EmptyEvaluationSet("no decisions to evaluate")
    rows = np.where(labels == 1, 0, 1)  # row 0 = true positive
    o = np.bincount(rows * 3 + outcomes, minlength=6).reshape(2, 3) / n
    e = np.outer(o.sum(axis=1), o.sum(axis=0))
    w = penalties.w
    o_cost = float((w * o).sum())
    e_cost = float((w * e).sum())
    if e_cost == 0.0:
        if o_cost == 0.0:
            return 1.0
        raise DegenerateExpectedCost("expected cost is zero but observed cost is not")
    return float(1.0 - o_cost / e_cost)


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    low: float | None
    high: float | None
    n_skipped: int = 0


def _resample_indices(seed: int, b: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
    return rng.integers(0, n, n)


def bootstrap(
    metric_fn: Callable[..., float],
    records: np.ndarray | Sequence[np.ndarray],
    n_boot: int = 1000,
    seed: int = 0,
) -> BootstrapResult:
    """95% percentile interval from N-out-of-N resampling with replacement.

    ``records`` is an array or a tuple of parallel arrays handed to
    metric_fn (resampled jointly). Resample b draws its indices from the
    substream (seed, b), so results do not depend on evaluation order.
    Resamples where the metric is undefined are skipped and counted.
    """
    arrays = (records,) if isinstance(records, np.ndarray) else tuple(records)
    n = len(arrays[0])
    if n < 2:
        raise TooFewRecords(f"need at least 2 records to bootstrap, got {n}")
    point = float(metric_fn(*arrays))
    stats = []
    skipped = 0
    for b in range(n_boot):
        idx = _resample_indices(seed, b, n)
        try:
            stats.append(float(metric_fn(*(a[idx] for a in arrays))))
        except UndefinedMetric:
            skipped += 1
    if not stats:
        return BootstrapResult(point=point, low=None, high=None, n_skipped=skipped)
    low, high = np.percentile(stats, [2.5, 97.5], method="linear")
    # the report contract promises intervals that contain the point
    return BootstrapResult(
        point=point,
        low=min(float(low), point),
        high=max(float(high), point),
        n_skipped=skipped,
    )


@dataclass(frozen=True)
class MetricValue:
    point: float | None
    low: float | None = None
    high: float | None = None
    n_skipped: int = 0
    note: str = ""

    @property
    def defined(self) -> bool:
        return self.point is not None

    def to_json(self) -> dict:
        return {
            "point": self.point,
            "ci95": None if self.low is None else [self.low, self.high],
            "n_skipped": self.n_skipped,
            "note": self.note or None,
        }


METRIC_ORDER = (
    "binary_f2",
    "clear_f2",
    "binary_ece",
    "clear_ece",
    "coverage",
    "tpdr",
    "aurc",
    "risk_kappa",
)


@dataclass(frozen=True)
class MetricsReport:
    values: dict[str, MetricValue]
    n_records: int
    n_clear: int
    n_boot: int
    seed: int
    config: dict = field(default_factory=dict)

    def __getattr__(self, name: str) -> MetricValue:
        values = object.__getattribute__(self, "values")
        if name in values:
            return values[name]
        raise AttributeError(name)

    def to_json(self) -> dict:
        return {
            "metrics": {k: self.values[k].to_json() for k in METRIC_ORDER},
            "n_records": self.n_records,
            "n_clear": self.n_clear,
            "n_boot": self.n_boot,
            "seed": self.seed,
            "config": self.config,
        }

    def to_json_str(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = [f"{'metric':<12}  value"]
        for name in METRIC_ORDER:
            v = self.values[name]
            if not v.defined:
                lines.append(f"{name:<12}  n/a ({v.note})")
                continue
            lines.append(f"{name:<12}  {v.point:.4f}")
            if v.low is not None:
                lines.append(f"{'':<12}  [{v.low:.4f}, {v.high:.4f}]")
        lines.append(f"records: {self.n_records}  clear: {self.n_clear}  n_boot: {self.n_boot}")
        return "\n".join(lines)


def _clear_counts(outcomes: np.ndarray, labels: np.ndarray) -> tuple[int, int, int]:
    tp = int(((outcomes == CLEAR_POSITIVE) & (labels == 1)).sum())
    fp = int(((outcomes == CLEAR_POSITIVE) & (labels == 0)).sum())
    fn = int(((outcomes == CLEAR_NEGATIVE) & (labels == 1)).sum())
    return tp, fp, fn


def _binary_counts(predicted: np.ndarray, labels: np.ndarray) -> tuple[int, int, int]:
    tp = int(((predicted == 1) & (labels == 1)).sum())
    fp = int(((predicted == 1) & (labels == 0)).sum())
    fn = int(((predicted == 0) & (labels == 1)).sum())
    return tp, fp, fn


def evaluate(
    labels: np.ndarray,
    predicted: np.ndarray,
    confidences: np.ndarray,
    outcomes: np.ndarray,
    penalties: PenaltyMatrix = DEFAULT_PENALTIES,
    n_boot: int = 1000,
    seed: int = 0,
    ece_bins: int = 10,
    config: dict | None = None,
) -> MetricsReport:
    """Assemble the full report over labeled test records.

    All four arrays are parallel (one entry per labeled test record).
    Bootstrap resamples are shared across metrics (same index stream),
    and per-metric undefined resamples are skipped and counted.
    """
    labels = np.asarray(labels, dtype=np.intp)
    predicted = np.asarray(predicted, dtype=np.intp)
    confidences = np.asarray(confidences, dtype=np.float64)
    outcomes = np.asarray(outcomes, dtype=np.intp)
    n = len(labels)
    if n == 0:
        raise EmptyEvaluationSet("no labeled test records")

    def guarded(fn) -> float | UndefinedMetric:
        try:
            return float(fn())
        except UndefinedMetric as exc:
            return exc

    def compute(lab, pred, conf, out) -> dict[str, float | UndefinedMetric]:
        clear = out != DEFER

        def on_clear(fn):
            if not clear.any():
                raise EmptyEvaluationSet("no Clear records")
            return fn()

        return {
            "binary_f2": guarded(lambda: f_beta(*_binary_counts(pred, lab))),
            "clear_f2": guarded(lambda: on_clear(lambda: f_beta(*_clear_counts(out, lab)))),
            "binary_ece": guarded(lambda: ece(conf, pred, lab, ece_bins)),
            "clear_ece": guarded(
                lambda: on_clear(lambda: ece(conf[clear], pred[clear], lab[clear], ece_bins))
            ),
            "coverage": float(clear.mean()),
            "tpdr": guarded(lambda: coverage_tpdr(out, lab)[1]),
            "aurc": guarded(lambda: aurc(conf, pred == lab)),
            "risk_kappa": guarded(lambda: risk_kappa(out, lab, penalties)),
        }

    clear_mask = outcomes != DEFER
    points = compute(labels, predicted, confidences, outcomes)

    samples: dict[str, list[float]] = {k: [] for k in METRIC_ORDER}
    skips: dict[str, int] = {k: 0 for k in METRIC_ORDER}
    if n_boot > 0 and n >= 2:
        for b in range(n_boot):
            idx = _resample_indices(seed, b, n)
            vals = compute(labels[idx], predicted[idx], confidences[idx], outcomes[idx])
            for k in METRIC_ORDER:
                v = vals[k]
                if isinstance(v, UndefinedMetric):
                    skips[k] += 1
                else:
                    samples[k].append(v)

    values: dict[str, MetricValue] = {}
    for k in METRIC_ORDER:
        p = points[k]
        if isinstance(p, UndefinedMetric):
            values[k] = MetricValue(point=None, note=str(p), n_skipped=skips[k])
            continue
        if n_boot > 0 and samples[k]:
            low, high = np.percentile(samples[k], [2.5, 97.5], method="linear")
            values[k] = MetricValue(
                point=p,
                low=min(float(low), p),
                high=max(float(high), p),
                n_skipped=skips[k],
            )
        else:
            values[k] = MetricValue(point=p, n_skipped=skips[k])

    return MetricsReport(
        values=values,
        n_records=n,
        n_clear=int(clear_mask.sum()),
        n_boot=n_boot,
        seed=seed,
        config=dict(config or {}),
    )
