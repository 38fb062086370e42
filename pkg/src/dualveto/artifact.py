"""The self-describing calibration artifact.

One JSON file holds everything the deferral policy needs at decision
time: per-member temperatures, the per-class conformal score arrays
(stored verbatim so any alpha can be queried later without refitting),
the geometric model (centroids, row-major precision matrix, shrinkage
weight, per-class thresholds) and the sorted validation entropies for
the entropy-percentile baseline. The file embeds the fit configuration
and content fingerprints for provenance; floats round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .conformal import ConformalCalibrator, fit_conformal
from .dataset_io import Cohort, aggregate_members, reference_embeddings
from .errors import MissingClassInCalibration, ValidationError
from .geometry import GeometricModel, fit_geometry, l2_normalize_rows
from .temperature import TemperatureModel, fit_temperature

FORMAT_NAME = "dualveto-artifact"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FitConfig:
    percentile: float = 99.0
    inertia_threshold: float = 0.05
    min_cluster_size: int | None = None
    k_max: int = 10
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CalibrationArtifact:
    temperatures: dict[int, TemperatureModel]
    conformal: ConformalCalibrator
    geometry: GeometricModel | None
    val_entropies: np.ndarray
    d: int
    member_ids: tuple[int, ...]
    fit_config: FitConfig = field(default_factory=FitConfig)
    cohort_fingerprint: str = ""

    def temperature_map(self) -> dict[int, float]:
        return {m: model.T for m, model in self.temperatures.items()}

    @property
    def fingerprint(self) -> str:
        payload = json.dumps(
            {"cohort": self.cohort_fingerprint, "config": self.fit_config.to_json()},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cohort_fingerprint(cohort: Cohort) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update("\x00".join(cohort.ids).encode())
    h.update(cohort.labels.astype(np.int16).tobytes())
    h.update(repr(cohort.member_ids).encode())
    h.update("\x00".join(str(t) for t in cohort.split_tags.ravel()).encode())
    h.update(np.ascontiguousarray(cohort.logits).tobytes())
    h.update(np.ascontiguousarray(cohort.embeddings).tobytes())
    return h.hexdigest()


def fit_artifact(cohort: Cohort, config: FitConfig | None = None) -> CalibrationArtifact:
    """Fit temperatures, conformal scores, geometry and entropy baseline.

    All calibration happens on labeled validation records: temperatures
    per member on that member's logits, the conformal scores and the
    entropy percentile pool on the aggregated calibrated probabilities,
    and the geometric model in the normalized reference-embedding space
    (one model across members, hosted by the lowest member_id).
    """
    config = config or FitConfig()
    val_mask = cohort.split_mask("val") & (cohort.labels >= 0)
    idx = np.flatnonzero(val_mask)
    labels = cohort.labels[idx].astype(np.intp)
    if idx.size == 0 or not ({0, 1} <= set(np.unique(labels).tolist())):
        raise MissingClassInCalibration(
            "val split must contain labeled records of both classes"
        )

    temperatures = {
        m: fit_temperature(cohort.logits[idx, j], labels)
        for j, m in enumerate(cohort.member_ids)
    }
    probs_all, entropy_all = aggregate_members(
        cohort, {m: t.T for m, t in temperatures.items()}
    )
    probs = probs_all[idx]
    calibrator = fit_conformal(probs, labels)
    predicted = np.argmax(probs, axis=1)
    embeddings = l2_normalize_rows(reference_embeddings(cohort, idx))
    geometry = fit_geometry(
        embeddings,
        labels,
        predicted,
        inertia_threshold=config.inertia_threshold,
        min_cluster_size=config.min_cluster_size,
        k_max=config.k_max,
        percentile=config.percentile,
        seed=config.seed,
    )
    return CalibrationArtifact(
        temperatures=temperatures,
        conformal=calibrator,
        geometry=geometry,
        val_entropies=np.sort(entropy_all[idx]),
        d=cohort.d,
        member_ids=cohort.member_ids,
        fit_config=config,
        cohort_fingerprint=cohort_fingerprint(cohort),
    )


def save_artifact(artifact: CalibrationArtifact, path: str) -> None:
    geo = artifact.geometry
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "d": artifact.d,
        "member_ids": list(artifact.member_ids),
        "temperatures": {
            str(m): {"T": t.T, "final_nll": t.final_nll, "iterations": t.iterations}
            for m, t in artifact.temperatures.items()
        },
        "conformal": {
            "scores_0": artifact.conformal.scores[0].tolist(),
            "scores_1": artifact.conformal.scores[1].tolist(),
        },
        "geometry": None
        if geo is None
        else {
            "k_per_class": list(geo.k_per_class),
            "centroids_0": geo.centroids[0].tolist(),
            "centroids_1": geo.centroids[1].tolist(),
            "precision": {"d": geo.d, "row_major": geo.precision.ravel().tolist()},
            "rho": geo.rho,
            "taus": list(geo.taus) if geo.taus is not None else None,
        },
        "val_entropies": artifact.val_entropies.tolist(),
        "fit_config": artifact.fit_config.to_json(),
        "cohort_fingerprint": artifact.cohort_fingerprint,
        "fingerprint": artifact.fingerprint,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_artifact(path: str) -> CalibrationArtifact:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT_NAME:
        raise ValidationError(f"{path} is not a calibration artifact")
    if doc.get("version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported artifact version {doc.get('version')}")
    temperatures = {
        int(m): TemperatureModel(T=t["T"], final_nll=t["final_nll"], iterations=t["iterations"])
        for m, t in doc["temperatures"].items()
    }
    calibrator = ConformalCalibrator(
        scores=(
            np.asarray(doc["conformal"]["scores_0"], dtype=np.float64),
            np.asarray(doc["conformal"]["scores_1"], dtype=np.float64),
        )
    )
    geometry = None
    if doc["geometry"] is not None:
        g = doc["geometry"]
        d = g["precision"]["d"]
        geometry = GeometricModel(
            centroids=(
                np.asarray(g["centroids_0"], dtype=np.float64),
                np.asarray(g["centroids_1"], dtype=np.float64),
            ),
            precision=np.asarray(g["precision"]["row_major"], dtype=np.float64).reshape(d, d),
            rho=g["rho"],
            taus=None if g["taus"] is None else (g["taus"][0], g["taus"][1]),
        )
    fc = doc["fit_config"]
    return CalibrationArtifact(
        temperatures=temperatures,
        conformal=calibrator,
        geometry=geometry,
        val_entropies=np.asarray(doc["val_entropies"], dtype=np.float64),
        d=doc["d"],
        member_ids=tuple(doc["member_ids"]),
        fit_config=FitConfig(
            percentile=fc["percentile"],
            inertia_threshold=fc["inertia_threshold"],
            min_cluster_size=fc["min_cluster_size"],
            k_max=fc["k_max"],
            seed=fc["seed"],
        ),
        cohort_fingerprint=doc["cohort_fingerprint"],
    )
