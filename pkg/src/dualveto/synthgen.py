"""Deterministic synthetic cohorts with known ground truth.

Embeddings are drawn from per-class Gaussian mixtures with a shared
spherical covariance, so the exact posterior is available in closed
form. Class c sits at (2c-1) * separation/2 along axis 0; extra mixture
components are offset by one separation along their own axis, which
keeps every pairwise component distance at least one separation apart.
Logits are the true posterior log-odds scaled by sharpness and a
miscalibration factor, plus optional per-member noise.

Out-of-distribution records exist only in the test split: each one is
planted at a displaced center far from every component, its label is
drawn from the base rate, and its logits are pinned at a confidently
in-range magnitude so the probabilistic gate accepts it. The sidecar
ground truth (mixture component, OOD flag, true posterior) is enough to
recompute the Bayes decision independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset_io import Cohort, save_cohort
from .errors import ConfigInvariantViolation

OOD_CONFIDENCE_PERCENTILE = 75.0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_train_per_class: tuple[int, int] = (250, 250)
    n_val_per_class: tuple[int, int] = (1000, 1000)
    n_test_per_class: tuple[int, int] = (2000, 2000)
    d: int = 16
    centroids_per_class: tuple[int, int] = (1, 2)
    class_separation: float = 4.0
    within_spread: float = 1.0
    ood_fraction: float = 0.0
    ood_displacement: float = 12.0
    logit_sharpness: float = 1.0
    miscalibration_factor: float = 1.0
    n_members: int = 1
    member_noise: float = 0.0

    def validate(self) -> None:
        checks = [
            (all(n >= 0 for n in self.n_train_per_class), "train counts must be >= 0"),
            (all(n >= 1 for n in self.n_val_per_class), "val counts must be >= 1"),
            (all(n >= 1 for n in self.n_test_per_class), "test counts must be >= 1"),
            (self.d >= 2, "d must be >= 2"),
            (all(k >= 1 for k in self.centroids_per_class), "centroid counts must be >= 1"),
            (self.d >= max(self.centroids_per_class), "d must cover the component axes"),
            (self.class_separation > 0, "class_separation must be positive"),
            (self.within_spread > 0, "within_spread must be positive"),
            (0.0 <= self.ood_fraction < 1.0, "ood_fraction must be in [0, 1)"),
            (self.logit_sharpness > 0, "logit_sharpness must be positive"),
            (self.miscalibration_factor >= 0, "miscalibration_factor must be >= 0"),
            (self.n_members >= 1, "n_members must be >= 1"),
            (self.member_noise >= 0, "member_noise must be >= 0"),
        ]
        if self.ood_fraction > 0:
            checks.append(
                (
                    self.ood_displacement > self.class_separation,
                    "ood_displacement must exceed class_separation",
                )
            )
        for ok, msg in checks:
            if not ok:
                raise ConfigInvariantViolation(msg)


@dataclass(frozen=True)
class GroundTruth:
    """Sidecar truth per id: generating component, OOD flag, posterior."""

    ids: tuple[str, ...]
    component: np.ndarray        # (n,) int, -1 for OOD
    is_ood: np.ndarray           # (n,) bool
    true_posterior_1: np.ndarray  # (n,)


def _component_centers(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    sep, d = config.class_separation, config.d
    centers = []
    for c in (0, 1):
        k = config.centroids_per_class[c]
        base = np.zeros(d)
        base[0] = (2 * c - 1) * sep / 2.0
        comp = np.tile(base, (k, 1))
        for j in range(1, k):
            comp[j, j] += sep
        centers.append(comp)
    return centers[0], centers[1]


def _log_mixture_density(x: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    # log of the equal-weight Gaussian mixture, constants shared across
    # classes dropped (they cancel in the posterior log-odds)
    d2 = (
        np.sum(x**2, axis=1)[:, None]
        - 2.0 * x @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    z = -d2 / (2.0 * sigma**2)
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1)) - math.log(len(centers))


def _posterior_logit(
    x: np.ndarray, centers0: np.ndarray, centers1: np.ndarray, sigma: float, prior1: float
) -> np.ndarray:
    ldr = _log_mixture_density(x, centers1, sigma) - _log_mixture_density(x, centers0, sigma)
    return ldr + math.log(prior1 / (1.0 - prior1))


def generate(config: SynthConfig) -> tuple[Cohort, GroundTruth]:
    """Build an in-memory cohort and its ground-truth sidecar."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    centers0, centers1 = _component_centers(config)
    centers = (centers0, centers1)
    sigma = config.within_spread

    all_ids: list[str] = []
    all_split: list[str] = []
    all_labels: list[int] = []
    all_logits: list[np.ndarray] = []
    all_emb: list[np.ndarray] = []
    gt_comp: list[np.ndarray] = []
    gt_ood: list[np.ndarray] = []
    gt_post: list[np.ndarray] = []

    plan = (
        ("train", "tr", config.n_train_per_class),
        ("val", "va", config.n_val_per_class),
        ("test", "te", config.n_test_per_class),
    )
    for split, prefix, (n0, n1) in plan:
        n_total = n0 + n1
        if n_total == 0:
            continue
        prior1 = n1 / n_total
        xs, comps, labels = [], [], []
        for c, n_c in ((0, n0), (1, n1)):
            if n_c == 0:
                continue
            comp = rng.integers(0, config.centroids_per_class[c], n_c)
            x = centers[c][comp] + sigma * rng.standard_normal((n_c, config.d))
            xs.append(x)
            comps.append(comp)
            labels.append(np.full(n_c, c, dtype=np.int8))
        x = np.vstack(xs)
        comp = np.concatenate(comps)
        labels_arr = np.concatenate(labels)
        is_ood = np.zeros(n_total, dtype=bool)

        if split == "test" and config.ood_fraction > 0.0:
            n_ood = int(round(config.ood_fraction * n_total))
            if n_ood > 0:
                idx = np.sort(rng.choice(n_total, n_ood, replace=False))
                anchor = (rng.random(n_ood) < prior1).astype(np.intp)
                k_anchor = np.asarray(config.centroids_per_class)[anchor]
                comp_anchor = np.floor(rng.random(n_ood) * k_anchor).astype(np.intp)
                dirs = rng.standard_normal((n_ood, config.d))
                dirs /= np.linalg.norm(dirs, axis=1)[:, None]
                base = np.stack([centers[a][j] for a, j in zip(anchor, comp_anchor)])
                x[idx] = base + config.ood_displacement * dirs
                labels_arr[idx] = (rng.random(n_ood) < prior1).astype(np.int8)
                is_ood[idx] = True
                comp[idx] = -1

        z_true = _posterior_logit(x, centers0, centers1, sigma, prior1)
        posterior = 1.0 / (1.0 + np.exp(-z_true))
        if is_ood.any():
            in_dist = np.abs(z_true[~is_ood])
            magnitude = float(np.percentile(in_dist, OOD_CONFIDENCE_PERCENTILE))
            anchor_sign = 2.0 * anchor - 1.0
            z_true[is_ood] = anchor_sign * magnitude
            posterior[is_ood] = prior1

        z = config.logit_sharpness * config.miscalibration_factor * z_true
        z_members = np.repeat(z[:, None], config.n_members, axis=1)
        if config.member_noise > 0.0:
            z_members = z_members + config.member_noise * rng.standard_normal(z_members.shape)
        logits = np.stack([-z_members / 2.0, z_members / 2.0], axis=2)
        embeddings = np.repeat(x[:, None, :], config.n_members, axis=1)

        ids = [f"{prefix}{i:06d}" for i in range(n_total)]
        all_ids.extend(ids)
        all_split.extend([split] * n_total)
        all_labels.extend(labels_arr.tolist())
        all_logits.append(logits)
        all_emb.append(embeddings)
        gt_comp.append(comp.astype(np.int32))
        gt_ood.append(is_ood)
        gt_post.append(posterior)

    logits = np.concatenate(all_logits)
    embeddings = np.concatenate(all_emb)
    component = np.concatenate(gt_comp)
    ood_flags = np.concatenate(gt_ood)
    posteriors = np.concatenate(gt_post)
    labels_all = np.asarray(all_labels, dtype=np.int8)
    split_all = np.asarray(all_split, dtype=object)

    order = np.argsort(np.asarray(all_ids))
    ids_sorted = tuple(all_ids[i] for i in order)
    k = config.n_members
    cohort = Cohort(
        ids=ids_sorted,
        split_base=split_all[order],
        split_tags=np.tile(split_all[order][:, None], (1, k)),
        labels=labels_all[order],
        member_ids=tuple(range(k)),
        logits=logits[order],
        embeddings=embeddings[order],
    )
    cohort.validate()
    truth = GroundTruth(
        ids=ids_sorted,
        component=component[order],
        is_ood=ood_flags[order],
        true_posterior_1=posteriors[order],
    )
    return cohort, truth


def save_ground_truth(truth: GroundTruth, path: str, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("id,component,is_ood,true_posterior_1\n")
        for i, id_ in enumerate(truth.ids):
            fh.write(
                "%s,%d,%d,%.17g\n"
                % (id_, truth.component[i], int(truth.is_ood[i]), truth.true_posterior_1[i])
            )


def generate_files(
    config: SynthConfig,
    cohort_path: str,
    truth_path: str,
    header_comment: str | None = None,
) -> tuple[Cohort, GroundTruth]:
    """Generate and write the cohort CSV plus its ground-truth sidecar."""
    cohort, truth = generate(config)
    save_cohort(cohort, cohort_path, header_comment=header_comment)
    save_ground_truth(truth, truth_path, header_comment=header_comment)
    return cohort, truth
