"""Geometric out-of-distribution veto in the L2-normalized embedding space.

Each class is summarized by one or more k-means centroids; the number of
centroids is chosen by an inertia-gain elbow rule. Residuals of all
samples to their assigned centroids are pooled across classes and a
single precision matrix is fitted with Oracle Approximating Shrinkage,
so clusters share a global noise structure instead of carrying unstable
per-cluster covariances. An input is scored by the minimum Mahalanobis
distance to the centroids of its predicted class; distances above the
class threshold (a percentile of distances from correctly classified
validation samples) veto automation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateResiduals,
    IllConditionedCovariance,
    NoCorrectSamplesForClass,
    TooFewPoints,
    UnfittedModel,
    ZeroVector,
)

N_RESTARTS = 5
MAX_ITER = 300
DEFAULT_INERTIA_THRESHOLD = 0.05
DEFAULT_K_MAX = 10
DEFAULT_PERCENTILE = 99.0


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """v / ||v||, rejecting vectors with norm <= 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= 1e-12:
        raise ZeroVector("cannot normalize a (near-)zero vector")
    return v / norm


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise normalization; any near-zero row raises ZeroVector."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= 1e-12):
        raise ZeroVector(f"row {int(np.argmin(norms))} has (near-)zero norm")
    return x / norms[:, None]


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray    # (k, d)
    assignments: np.ndarray  # (n,)
    inertia: float


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances
    return (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int) -> KMeansResult:
    n, k = len(points), len(centers)
    assignments = np.full(n, -1, dtype=np.intp)
    for _ in range(max_iter):
        d2 = _sq_dists(points, centers)
        new_assign = np.argmin(d2, axis=1)
        # keep every cluster populated: hand the globally farthest point
        # to each empty cluster, lowest cluster index first
        counts = np.bincount(new_assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            current = d2[np.arange(n), new_assign].copy()
            current[counts[new_assign] <= 1] = -1.0
            far = int(np.argmax(current))
            counts[new_assign[far]] -= 1
            new_assign[far] = empty
            counts[empty] += 1
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for c in range(k):
            centers[c] = points[assignments == c].mean(axis=0)
    d2 = _sq_dists(points, centers)
    inertia = float(d2[np.arange(n), assignments].sum())
    return KMeansResult(centroids=centers, assignments=assignments, inertia=inertia)


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    n_restarts: int = N_RESTARTS,
    max_iter: int = MAX_ITER,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding and restarts.

    Restart r draws from the substream (seed, r); the best inertia wins
    and ties keep the earliest restart, so the result is deterministic
    for a given seed and point order.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise TooFewPoints(f"need 1 <= k <= n, got k={k}, n={n}")
    best: KMeansResult | None = None
    for r in range(n_restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        centers = _kmeanspp(points, k, rng)
        result = _lloyd(points, centers.copy(), max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    assert best is not None
    return best


def _canonical_order(points: np.ndarray) -> np.ndarray:
    """Indices that sort rows lexicographically (first column primary)."""
    return np.lexsort(points.T[::-1])


def _data_seed(points_sorted: np.ndarray, master_seed: int) -> int:
    digest = hashlib.blake2b(points_sorted.tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "big") ^ (master_seed & 0xFFFFFFFFFFFFFFFF)


def select_k(
    points: np.ndarray,
    inertia_threshold: float = DEFAULT_INERTIA_THRESHOLD,
    min_cluster_size: int = 1,
    k_max: int = DEFAULT_K_MAX,
    seed: int = 0,
) -> int:
    """Elbow rule on relative inertia gain, with a cluster-size floor.

    gain(K) = (I(K-1) - I(K)) / I(K-1); scanning K upward stops at the
    first gain below the threshold (or at zero inertia), and the answer
    is the largest scanned K whose clustering keeps every cluster at or
    above min_cluster_size. Permutation invariance comes from clustering
    the rows in lexicographic order with a seed keyed to their hash.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < max(min_cluster_size, 1):
        raise TooFewPoints(f"{n} points < min_cluster_size {min_cluster_size}")
    k, _ = _select_k_result(points, inertia_threshold, min_cluster_size, k_max, seed)
    return k


def _select_k_result(
    points: np.ndarray,
    inertia_threshold: float,
    min_cluster_size: int,
    k_max: int,
    seed: int,
) -> tuple[int, KMeansResult]:
    """select_k plus the clustering at the chosen K, in input row order."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 1:
        raise TooFewPoints("no points to cluster")
    order = _canonical_order(points)
    sorted_pts = points[order]
    derived = _data_seed(sorted_pts, seed)
    limit = min(k_max, n)

    results: dict[int, KMeansResult] = {1: kmeans(sorted_pts, 1, derived)}
    best_k = 1
    prev = results[1].inertia
    for k in range(2, limit + 1):
        if prev <= 0.0:
            break  # zero inertia, nothing left to explain
        res = kmeans(sorted_pts, k, derived)
        gain = (prev - res.inertia) / prev
        if gain < inertia_threshold:
            break
        results[k] = res
        sizes = np.bincount(res.assignments, minlength=k)
        if sizes.min() >= min_cluster_size:
            best_k = k
        prev = res.inertia

    chosen = results[best_k]
    inverse = np.empty(n, dtype=np.intp)
    inverse[order] = np.arange(n)
    return best_k, KMeansResult(
        centroids=chosen.centroids,
        assignments=chosen.assignments[inverse],
        inertia=chosen.inertia,
    )


def fit_covariance(residuals: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Oracle Approximating Shrinkage covariance of mean-zero residuals.

    S = (1/n) sum r r^T (plug-in divisor n: residuals are centered on
    their assigned centroids by construction). The shrinkage weight is

        rho = min(1, [(1 - 2/d) tr(S^2) + tr(S)^2]
                     / [(n + 1 - 2/d) (tr(S^2) - tr(S)^2 / d)])

    with rho = 1 when the denominator is non-positive (spherical S), and
    the estimate is (1 - rho) S + rho (tr(S)/d) I. The precision matrix
    comes from a Cholesky factorization, escalating a small diagonal
    jitter on failure before giving up.

    Returns (covariance, precision, rho).
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    n, d = residuals.shape
    if n < 2:
        raise DegenerateResiduals(f"need at least 2 residuals, got {n}")
    if d < 2:
        raise DegenerateResiduals(f"need dimension >= 2, got {d}")

    s = residuals.T @ residuals / n
    tr_s = float(np.trace(s))
    tr_s2 = float(np.sum(s * s))  # tr(S^2) for symmetric S
    mu = tr_s / d
    num = (1.0 - 2.0 / d) * tr_s2 + tr_s**2
    den = (n + 1.0 - 2.0 / d) * (tr_s2 - tr_s**2 / d)
    rho = 1.0 if den <= 0.0 else min(1.0, num / den)
    sigma = (1.0 - rho) * s + rho * mu * np.eye(d)
    sigma = (sigma + sigma.T) / 2.0

    scale = float(np.trace(sigma)) / d
    chol = None
    jitter = 0.0
    for eps in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        jitter = eps * scale
        try:
            chol = np.linalg.cholesky(sigma + jitter * np.eye(d))
            break
        except np.linalg.LinAlgError:
            continue
    if chol is None:
        raise IllConditionedCovariance(
            "covariance not positive-definite even after jitter escalation"
        )
    inv_l = np.linalg.solve(chol, np.eye(d))
    precision = inv_l.T @ inv_l
    precision = (precision + precision.T) / 2.0
    return sigma, precision, rho


@dataclass(frozen=True)
class GeometricModel:
    """Per-class centroids with a shared shrunk precision matrix."""

    centroids: tuple[np.ndarray, np.ndarray]  # (K_c, d) per class
    precision: np.ndarray                     # (d, d)
    rho: float
    taus: tuple[float, float] | None = None   # per-class distance thresholds

    @property
    def d(self) -> int:
        return self.precision.shape[0]

    @property
    def k_per_class(self) -> tuple[int, int]:
        return (len(self.centroids[0]), len(self.centroids[1]))

    def require_thresholds(self) -> tuple[float, float]:
        if self.taus is None:
            raise UnfittedModel("distance thresholds not fitted")
        return self.taus


def mahalanobis_min(x: np.ndarray, predicted_class: int, model: GeometricModel) -> float:
    """Minimum Mahalanobis distance to the predicted class's centroids."""
    if model is None:
        raise UnfittedModel("geometric model not fitted")
    x = np.asarray(x, dtype=np.float64)
    return float(mahalanobis_min_batch(x[None, :], np.array([predicted_class]), model)[0])


def mahalanobis_min_batch(
    x: np.ndarray, predicted: np.ndarray, model: GeometricModel
) -> np.ndarray:
    """Vectorized mahalanobis_min over rows of x with per-row classes."""
    x = np.asarray(x, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.intp)
    out = np.empty(len(x))
    for c in (0, 1):
        mask = predicted == c
        if not mask.any():
            continue
        r = x[mask][:, None, :] - model.centroids[c][None, :, :]
        q = np.einsum("nkd,de,nke->nk", r, model.precision, r)
        out[mask] = np.sqrt(np.maximum(q.min(axis=1), 0.0))
    return out


def fit_thresholds(
    model: GeometricModel,
    embeddings: np.ndarray,
    predicted: np.ndarray,
    true_labels: np.ndarray,
    percentile: float = DEFAULT_PERCENTILE,
) -> tuple[float, float]:
    """Per-class distance thresholds from correctly classified samples.

    For each class c, tau_c is the linear-interpolation percentile of
    mahalanobis_min over validation samples with predicted == true == c.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.intp)
    true_labels = np.asarray(true_labels, dtype=np.intp)
    if not (0.0 < percentile <= 100.0):
        raise NoCorrectSamplesForClass(f"percentile must be in (0, 100], got {percentile}")
    taus = []
    for c in (0, 1):
        mask = (predicted == c) & (true_labels == c)
        if mask.sum() < 2:
            raise NoCorrectSamplesForClass(
                f"fewer than 2 correctly classified validation samples for class {c}"
            )
        dists = mahalanobis_min_batch(embeddings[mask], np.full(mask.sum(), c), model)
        taus.append(float(np.percentile(dists, percentile, method="linear")))
    return (taus[0], taus[1])


def fit_geometry(
    embeddings: np.ndarray,
    true_labels: np.ndarray,
    predicted: np.ndarray,
    inertia_threshold: float = DEFAULT_INERTIA_THRESHOLD,
    min_cluster_size: int | None = None,
    k_max: int = DEFAULT_K_MAX,
    percentile: float = DEFAULT_PERCENTILE,
    seed: int = 0,
) -> GeometricModel:
    """Fit centroids, pooled OAS precision and thresholds on validation data.

    ``embeddings`` must already be L2-normalized. Centroids are fitted
    per true class with select_k; residuals of every sample to its
    assigned centroid are pooled across classes for the covariance.
    min_cluster_size defaults to max(20, 1% of the class sample count),
    clamped to the class size.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    true_labels = np.asarray(true_labels, dtype=np.intp)
    predicted = np.asarray(predicted, dtype=np.intp)

    centroid_lists = []
    residual_blocks = []
    for c in (0, 1):
        pts = embeddings[true_labels == c]
        if len(pts) < 2:
            raise TooFewPoints(f"class {c} has {len(pts)} validation embeddings, need >= 2")
        if min_cluster_size is None:
            mcs = min(max(20, math.ceil(0.01 * len(pts))), len(pts))
        else:
            mcs = min_cluster_size
            if len(pts) < mcs:
                raise TooFewPoints(
                    f"class {c}: {len(pts)} points < min_cluster_size {mcs}"
                )
        _, result = _select_k_result(pts, inertia_threshold, mcs, k_max, seed)
        centroid_lists.append(result.centroids)
        residual_blocks.append(pts - result.centroids[result.assignments])

    residuals = np.vstack(residual_blocks)
    _, precision, rho = fit_covariance(residuals)
    model = GeometricModel(
        centroids=(centroid_lists[0], centroid_lists[1]),
        precision=precision,
        rho=rho,
    )
    taus = fit_thresholds(model, embeddings, predicted, true_labels, percentile)
    return replace(model, taus=taus)
