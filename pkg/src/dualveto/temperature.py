"""Post-hoc temperature scaling for binary logits.

A single scalar T > 0 divides the logits before the softmax; T is chosen
to minimize the mean negative log likelihood on a validation set, which
corrects overconfidence without ever changing the argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLogit, SingleClassCalibrationSet

T_MIN = 0.05
T_MAX = 20.0
TOLERANCE = 1e-6

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TemperatureModel:
    T: float
    final_nll: float
    iterations: int


def mean_nll(logits: np.ndarray, labels: np.ndarray, T: float = 1.0) -> float:
    """Mean negative log likelihood of softmax(logits / T) at the labels."""
    z = np.asarray(logits, dtype=np.float64) / T
    # -log p_y = logsumexp(z) - z_y, computed with max subtraction
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    z_true = z[np.arange(len(labels)), labels]
    return float(np.mean(lse - z_true))


def fit_temperature(logits: np.ndarray, labels: np.ndarray) -> TemperatureModel:
    """Golden-section search for the NLL-minimizing temperature.

    The search runs on [T_MIN, T_MAX] to a bracket width of 1e-6; the
    NLL is unimodal in T for binary logits, so the section search finds
    the scalar optimum. The returned T never has a higher NLL than the
    interval endpoints or T=1.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise NonFiniteLogit("logits must be an (n, 2) array")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogit("non-finite logit in calibration set")
    present = set(np.unique(labels).tolist())
    if not {0, 1} <= present:
        raise SingleClassCalibrationSet(
            f"calibration set must contain both classes, found {sorted(present)}"
        )

    def nll(t: float) -> float:
        return mean_nll(logits, labels, t)

    a, b = T_MIN, T_MAX
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = nll(c), nll(d)
    iterations = 0
    while (b - a) > TOLERANCE:
        iterations += 1
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = nll(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = nll(d)
    t_star = 0.5 * (a + b)
    # endpoints catch boundary optima exactly; T=1 guards the no-worse-
    # than-identity contract against bracket rounding
    best_t, best_f = t_star, nll(t_star)
    for cand in (1.0, T_MIN, T_MAX):
        f = nll(cand)
        if f < best_f:
            best_t, best_f = cand, f
    return TemperatureModel(T=best_t, final_nll=best_f, iterations=iterations)


def apply_temperature(logits: np.ndarray, model: TemperatureModel | float) -> np.ndarray:
    """Softmax of logits / T with max subtraction; rows sum to 1."""
    t = model.T if isinstance(model, TemperatureModel) else float(model)
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
