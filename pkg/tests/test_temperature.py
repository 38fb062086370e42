import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualveto import errors
from dualveto.temperature import (
    T_MAX,
    T_MIN,
    apply_temperature,
    fit_temperature,
    mean_nll,
)


def _calibrated_logits(n, seed, scale=2.0):
    """Logits whose NLL optimum sits at T=1 by construction: labels are
    drawn from the very Bernoulli the logits encode."""
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, scale, n)
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-z))).astype(int)
    return np.stack([-z / 2.0, z / 2.0], axis=1), y


def test_fit_recovers_unit_temperature():
    logits, y = _calibrated_logits(20000, seed=0)
    model = fit_temperature(logits, y)
    assert abs(model.T - 1.0) <= 0.05


def test_fit_recovers_scaled_temperature():
    logits, y = _calibrated_logits(20000, seed=1)
    model = fit_temperature(3.0 * logits, y)
    assert abs(model.T - 3.0) <= 0.1


def test_separable_pair_hits_lower_bound():
    logits = np.array([[2.0, -2.0], [-2.0, 2.0]])
    labels = np.array([0, 1])
    model = fit_temperature(logits, labels)
    assert model.T == T_MIN


def test_fitted_nll_never_worse_than_identity():
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        logits = rng.normal(0, 3, (500, 2))
        labels = rng.integers(0, 2, 500)
        model = fit_temperature(logits, labels)
        assert model.final_nll <= mean_nll(logits, labels, 1.0) + 1e-12
        assert T_MIN <= model.T <= T_MAX


def test_fit_is_deterministic():
    logits, y = _calibrated_logits(2000, seed=3)
    a = fit_temperature(logits, y)
    b = fit_temperature(logits, y)
    assert a.T == b.T and a.final_nll == b.final_nll and a.iterations == b.iterations


def test_fit_rejects_single_class():
    logits = np.array([[1.0, 0.0], [0.5, 0.2]])
    with pytest.raises(errors.SingleClassCalibrationSet):
        fit_temperature(logits, np.array([1, 1]))


def test_fit_rejects_non_finite():
    logits = np.array([[1.0, 0.0], [np.inf, 0.2]])
    with pytest.raises(errors.NonFiniteLogit):
        fit_temperature(logits, np.array([0, 1]))


def test_apply_symmetric_logits():
    np.testing.assert_allclose(apply_temperature(np.array([0.0, 0.0]), 7.3), [0.5, 0.5])


def test_apply_closed_form():
    p = apply_temperature(np.array([math.log(3.0), 0.0]), 1.0)
    np.testing.assert_allclose(p, [0.75, 0.25], atol=1e-15)


def test_apply_extreme_logits_match_extended_precision():
    mpmath = pytest.importorskip("mpmath")
    p = apply_temperature(np.array([1000.0, 0.0]), 1.0)
    assert np.all(np.isfinite(p))
    exact = mpmath.mp
    exact.prec = 200
    e = exact.exp(-1000)
    expected0 = float(1 / (1 + e))
    assert p[0] == pytest.approx(expected0, abs=1e-15)
    assert 0.0 <= p[1] <= float(e * 2)


@settings(max_examples=200, deadline=None)
@given(
    l0=st.floats(-50, 50),
    l1=st.floats(-50, 50),
    t=st.floats(0.05, 20.0),
)
def test_temperature_never_flips_argmax(l0, l1, t):
    logits = np.array([l0, l1])
    p = apply_temperature(logits, t)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    if l0 != l1:
        assert int(np.argmax(p)) == int(np.argmax(logits))
