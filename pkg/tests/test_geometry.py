import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualveto import errors
from dualveto.geometry import (
    GeometricModel,
    fit_covariance,
    fit_geometry,
    fit_thresholds,
    kmeans,
    l2_normalize,
    l2_normalize_rows,
    mahalanobis_min,
    mahalanobis_min_batch,
    select_k,
)


# l2_normalize

def test_normalize_345_triangle():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])


def test_normalize_idempotent_on_unit_vector():
    v = l2_normalize(np.array([1.0, 2.0, 2.0]))
    np.testing.assert_allclose(l2_normalize(v), v, atol=1e-15)


def test_normalize_zero_vector():
    with pytest.raises(errors.ZeroVector):
        l2_normalize(np.zeros(3))
    with pytest.raises(errors.ZeroVector):
        l2_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=16))
def test_normalize_property(vals):
    v = np.asarray(vals)
    if np.linalg.norm(v) <= 1e-12:
        return
    u = l2_normalize(v)
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(u * np.linalg.norm(v), v, atol=1e-6 * max(1, np.abs(v).max()))


# kmeans

def test_kmeans_single_cluster_closed_form():
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 1, (40, 3))
    res = kmeans(pts, 1, seed=0)
    np.testing.assert_allclose(res.centroids[0], pts.mean(axis=0), atol=1e-12)
    assert res.inertia == pytest.approx(((pts - pts.mean(axis=0)) ** 2).sum(), abs=1e-9)


def test_kmeans_two_blobs():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 0.05, (100, 2)) + [5.0, 0.0]
    b = rng.normal(0, 0.05, (100, 2)) + [-5.0, 0.0]
    res = kmeans(np.vstack([a, b]), 2, seed=1)
    got = sorted(res.centroids[:, 0].tolist())
    assert got[0] == pytest.approx(b[:, 0].mean(), abs=0.01)
    assert got[1] == pytest.approx(a[:, 0].mean(), abs=0.01)
    assert np.bincount(res.assignments).tolist() == [100, 100]


def brute_force_two_cluster_inertia(pts):
    n = len(pts)
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):
        a = [i for i in range(n) if (mask >> i) & 1]
        b = [i for i in range(n) if not (mask >> i) & 1]
        if not a or not b:
            continue
        ia = ((pts[a] - pts[a].mean(axis=0)) ** 2).sum()
        ib = ((pts[b] - pts[b].mean(axis=0)) ** 2).sum()
        best = min(best, ia + ib)
    return best


def test_kmeans_matches_exhaustive_partitions():
    rng = np.random.default_rng(7)
    pts = rng.random((6, 2))
    res = kmeans(pts, 2, seed=7)
    assert res.inertia == pytest.approx(brute_force_two_cluster_inertia(pts), abs=1e-9)


def test_kmeans_deterministic_and_bounds():
    rng = np.random.default_rng(5)
    pts = rng.random((30, 4))
    a = kmeans(pts, 3, seed=42)
    b = kmeans(pts, 3, seed=42)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.inertia == b.inertia
    with pytest.raises(errors.TooFewPoints):
        kmeans(pts, 31, seed=0)
    with pytest.raises(errors.TooFewPoints):
        kmeans(pts, 0, seed=0)


def test_kmeans_keeps_clusters_populated():
    # duplicated points force empty-cluster repair
    pts = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 5)
    res = kmeans(pts, 2, seed=3)
    assert np.bincount(res.assignments, minlength=2).min() >= 1
    assert res.inertia == pytest.approx(0.0, abs=1e-12)


# select_k

def test_select_k_single_blob_is_one():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((2000, 24))
    assert select_k(pts, inertia_threshold=0.05, min_cluster_size=20, k_max=10, seed=0) == 1


def test_select_k_two_blobs_is_two():
    rng = np.random.default_rng(1)
    offset = np.array([6.0] + [0.0] * 23)
    pts = np.vstack(
        [
            rng.standard_normal((400, 24)) + offset,
            rng.standard_normal((400, 24)) - offset,
        ]
    )
    assert select_k(pts, inertia_threshold=0.05, min_cluster_size=20, k_max=10, seed=1) == 2


def test_select_k_identical_points_guard():
    pts = np.tile([1.5, -2.0], (50, 1))
    assert select_k(pts, min_cluster_size=5, seed=0) == 1


def test_select_k_permutation_invariant():
    rng = np.random.default_rng(2)
    offset = np.array([6.0] + [0.0] * 23)
    pts = np.vstack(
        [
            rng.standard_normal((300, 24)) + offset,
            rng.standard_normal((300, 24)),
        ]
    )
    k1 = select_k(pts, min_cluster_size=20, seed=9)
    shuffled = pts[rng.permutation(len(pts))]
    k2 = select_k(shuffled, min_cluster_size=20, seed=9)
    assert k1 == k2 == 2


def test_select_k_min_cluster_size_blocks_split():
    rng = np.random.default_rng(3)
    # 12 outliers far away would form their own cluster, below the floor
    pts = np.vstack(
        [rng.standard_normal((300, 4)), rng.standard_normal((12, 4)) + 50.0]
    )
    assert select_k(pts, min_cluster_size=30, k_max=6, seed=3) == 1
    assert select_k(pts, min_cluster_size=5, k_max=6, seed=3) >= 2


def test_select_k_too_few_points():
    with pytest.raises(errors.TooFewPoints):
        select_k(np.zeros((3, 2)), min_cluster_size=10, seed=0)


# fit_covariance (OAS)

def test_oas_identity_case_exact():
    residuals = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    sigma, precision, rho = fit_covariance(residuals)
    np.testing.assert_allclose(sigma, 0.5 * np.eye(2), atol=1e-15)
    np.testing.assert_allclose(precision, 2.0 * np.eye(2), atol=1e-12)
    assert rho == 1.0  # spherical S, denominator zero


def test_oas_rank_one_residuals_stay_invertible():
    v = l2_normalize(np.array([1.0, 2.0, 3.0, 4.0]))
    residuals = np.tile(v, (10, 1)) * 0.7
    sigma, precision, rho = fit_covariance(residuals)
    assert 0.0 < rho <= 1.0
    assert np.linalg.cond(sigma) < 1e8
    np.testing.assert_allclose(sigma @ precision, np.eye(4), atol=1e-8)


def test_oas_shrinkage_no_worse_than_sample_estimate():
    true_cov = np.eye(8)
    wins = 0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        r = rng.standard_normal((10000, 8))
        s = r.T @ r / len(r)
        sigma, _, _ = fit_covariance(r)
        wins += np.linalg.norm(sigma - true_cov) <= np.linalg.norm(s - true_cov)
    assert wins >= 16


def test_oas_formula_against_direct_arithmetic():
    rng = np.random.default_rng(11)
    r = rng.standard_normal((50, 4)) @ np.diag([1.0, 2.0, 0.5, 1.5])
    sigma, _, rho = fit_covariance(r)
    n, d = r.shape
    s = r.T @ r / n
    tr_s = np.trace(s)
    tr_s2 = np.trace(s @ s)
    num = (1 - 2 / d) * tr_s2 + tr_s**2
    den = (n + 1 - 2 / d) * (tr_s2 - tr_s**2 / d)
    rho_direct = min(1.0, num / den)
    assert rho == pytest.approx(rho_direct, abs=1e-12)
    np.testing.assert_allclose(
        sigma, (1 - rho_direct) * s + rho_direct * (tr_s / d) * np.eye(d), atol=1e-12
    )


def test_oas_requires_two_residuals():
    with pytest.raises(errors.DegenerateResiduals):
        fit_covariance(np.array([[1.0, 2.0]]))


def test_oas_all_zero_residuals_is_numerical_error():
    with pytest.raises(errors.IllConditionedCovariance):
        fit_covariance(np.zeros((5, 3)))


# mahalanobis

def _random_model(rng, d, ks):
    a = rng.standard_normal((d, d))
    precision = a @ a.T + d * np.eye(d)
    centroids = tuple(rng.standard_normal((k, d)) for k in ks)
    return GeometricModel(centroids=centroids, precision=precision, rho=0.1, taus=(1.0, 1.0))


def test_mahalanobis_zero_at_centroid():
    rng = np.random.default_rng(0)
    model = _random_model(rng, 5, (3, 2))
    x = model.centroids[0][1]
    assert mahalanobis_min(x, 0, model) == 0.0
    assert mahalanobis_min(x + 0.01, 0, model) > 0.0


def test_mahalanobis_identity_precision_is_euclidean():
    centroids = (np.array([[0.0, 0.0], [4.0, 0.0]]), np.array([[9.0, 9.0]]))
    model = GeometricModel(centroids=centroids, precision=np.eye(2), rho=0.0, taus=(1, 1))
    assert mahalanobis_min(np.array([1.0, 0.0]), 0, model) == pytest.approx(1.0)
    assert mahalanobis_min(np.array([3.0, 0.0]), 0, model) == pytest.approx(1.0)


def test_mahalanobis_matches_brute_force():
    rng = np.random.default_rng(1)
    model = _random_model(rng, 6, (4, 4))
    for _ in range(50):
        x = rng.standard_normal(6)
        c = int(rng.integers(0, 2))
        expected = min(
            math.sqrt((x - mu) @ model.precision @ (x - mu)) for mu in model.centroids[c]
        )
        assert mahalanobis_min(x, c, model) == pytest.approx(expected, abs=1e-9)


def test_mahalanobis_batch_matches_scalar():
    rng = np.random.default_rng(2)
    model = _random_model(rng, 4, (2, 3))
    xs = rng.standard_normal((30, 4))
    preds = rng.integers(0, 2, 30)
    batch = mahalanobis_min_batch(xs, preds, model)
    for i in range(30):
        assert batch[i] == pytest.approx(mahalanobis_min(xs[i], preds[i], model), abs=1e-12)


# thresholds

def _distance_model_on_axis():
    """Identity-precision model whose class-0 distances equal |x_0 - 0|."""
    centroids = (np.zeros((1, 2)), np.array([[100.0, 0.0]]))
    return GeometricModel(centroids=centroids, precision=np.eye(2), rho=0.0)


def test_threshold_linear_interpolation():
    model = _distance_model_on_axis()
    emb = np.zeros((200, 2))
    emb[:100, 0] = np.arange(1, 101)          # class-0 distances 1..100
    emb[100:, 0] = 100.0 + np.arange(1, 101)  # class 1 near its centroid
    predicted = np.array([0] * 100 + [1] * 100)
    tau0, _ = fit_thresholds(model, emb, predicted, predicted, percentile=99.0)
    assert tau0 == pytest.approx(99.01)  # rank r = 1 + 0.99 * 99


def test_threshold_constant_distances():
    model = _distance_model_on_axis()
    emb = np.zeros((8, 2))
    emb[:4, 0] = 7.0
    emb[4:, 0] = 100.0
    predicted = np.array([0] * 4 + [1] * 4)
    for pct in (10.0, 50.0, 99.0):
        tau0, _ = fit_thresholds(model, emb, predicted, predicted, percentile=pct)
        assert tau0 == pytest.approx(7.0)


def test_threshold_percentile_100_is_max():
    model = _distance_model_on_axis()
    emb = np.zeros((10, 2))
    emb[:5, 0] = [1.0, 2.0, 3.0, 4.0, 11.0]
    emb[5:, 0] = 100.0
    predicted = np.array([0] * 5 + [1] * 5)
    tau0, _ = fit_thresholds(model, emb, predicted, predicted, percentile=100.0)
    assert tau0 == pytest.approx(11.0)


def test_threshold_monotone_in_percentile():
    rng = np.random.default_rng(4)
    model = _distance_model_on_axis()
    emb = np.zeros((100, 2))
    emb[:50, 0] = rng.random(50) * 10
    emb[50:, 0] = 100.0 + rng.random(50)
    predicted = np.array([0] * 50 + [1] * 50)
    taus = [
        fit_thresholds(model, emb, predicted, predicted, percentile=p)
        for p in (90.0, 95.0, 99.0, 100.0)
    ]
    for lo, hi in zip(taus, taus[1:]):
        assert hi[0] >= lo[0] and hi[1] >= lo[1]


def test_threshold_needs_correct_samples():
    model = _distance_model_on_axis()
    emb = np.zeros((4, 2))
    predicted = np.array([0, 0, 0, 0])
    true = np.array([0, 0, 1, 1])  # class 1 never predicted correctly
    with pytest.raises(errors.NoCorrectSamplesForClass):
        fit_thresholds(model, emb, predicted, true)


# fit_geometry

def test_fit_geometry_end_to_end():
    rng = np.random.default_rng(6)
    n = 400
    emb0 = rng.normal(0, 0.05, (n, 24)) + np.array([1.0] + [0.0] * 23)
    emb1 = rng.normal(0, 0.05, (n, 24)) + np.array([0.0, 1.0] + [0.0] * 22)
    emb = l2_normalize_rows(np.vstack([emb0, emb1]))
    labels = np.array([0] * n + [1] * n)
    model = fit_geometry(emb, labels, labels, min_cluster_size=20, k_max=4, seed=0)
    assert model.k_per_class == (1, 1)
    assert model.taus is not None and model.taus[0] > 0
    np.testing.assert_allclose(model.precision, model.precision.T, atol=1e-9)
    # the fitted threshold is the 99th percentile of in-class distances
    d0 = mahalanobis_min_batch(emb[:n], np.zeros(n, dtype=int), model)
    assert np.percentile(d0, 99.0) <= model.taus[0] + 1e-9
    # far-off points get vetoed
    far = l2_normalize(np.array([0.0] * 23 + [1.0]))
    assert mahalanobis_min(far, 0, model) > model.taus[0]


def test_fit_geometry_respects_k_max():
    rng = np.random.default_rng(8)
    emb = l2_normalize_rows(rng.normal(0, 1, (300, 3)))
    labels = np.array([0] * 150 + [1] * 150)
    model = fit_geometry(emb, labels, labels, min_cluster_size=5, k_max=2, seed=0)
    assert max(model.k_per_class) <= 2
