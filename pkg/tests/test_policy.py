import dataclasses
import math

import numpy as np
import pytest

import dualveto as dv
from dualveto import errors
from dualveto.policy import (
    CLEAR_NEGATIVE,
    CLEAR_POSITIVE,
    DEFER,
    REASON_AMBIGUOUS,
    REASON_BOTH,
    REASON_OOD,
    PolicyConfig,
    decide,
    triage_cohort,
)

from conftest import handmade_artifact, small_synth

# handmade calibrator: 4 scores per class, alpha=0.5 -> rank ceil(5*0.5)=3
# -> quantile 0.2; class c is in the set iff p_c >= 0.8
ALPHA = 0.5


def test_decide_clear_negative_at_centroid():
    art = handmade_artifact()
    d = decide(np.array([0.9, 0.1]), np.array([1.0, 0.0]), art, PolicyConfig(alpha=ALPHA))
    assert d.outcome == CLEAR_NEGATIVE and d.reason is None
    assert d.set_cardinality == 1 and d.d_m == 0.0 and d.predicted_class == 0
    assert d.confidence == pytest.approx(0.9)


def test_decide_ambiguous_set_at_centroid():
    art = handmade_artifact(scores0=[0.6] * 4, scores1=[0.6] * 4)
    d = decide(np.array([0.5, 0.5]), np.array([1.0, 0.0]), art, PolicyConfig(alpha=ALPHA))
    assert d.outcome == DEFER and d.reason == REASON_AMBIGUOUS
    assert d.set_cardinality == 2 and d.d_m == 0.0


def test_decide_geometric_ood_and_both():
    art = handmade_artifact(taus=(0.5, 0.5))
    far = np.array([0.0, -1.0])  # distance > tau to both centroids
    d = decide(np.array([0.1, 0.9]), far, art, PolicyConfig(alpha=ALPHA))
    assert d.outcome == DEFER and d.reason == REASON_OOD
    assert d.set_cardinality == 1 and d.d_m > d.tau
    d2 = decide(np.array([0.7, 0.3]), far, art, PolicyConfig(alpha=ALPHA))
    assert d2.outcome == DEFER and d2.reason == REASON_BOTH
    assert d2.set_cardinality == 0


def test_single_gate_policies_ignore_the_other_gate():
    art = handmade_artifact(taus=(0.5, 0.5))
    far = np.array([0.0, -1.0])
    aleatoric = PolicyConfig(alpha=ALPHA, policy_kind="aleatoric_only")
    epistemic = PolicyConfig(alpha=ALPHA, policy_kind="epistemic_only")
    d = decide(np.array([0.1, 0.9]), far, art, aleatoric)
    assert d.outcome == CLEAR_POSITIVE  # distance gate ignored
    d = decide(np.array([0.5, 0.5]), np.array([1.0, 0.0]), art, epistemic)
    assert d.outcome == CLEAR_NEGATIVE  # set gate ignored
    assert d.predicted_class == 0


def test_standard_uncertainty_threshold():
    art = handmade_artifact(entropies=np.linspace(0.0, 0.6, 100))
    config = PolicyConfig(alpha=ALPHA, policy_kind="standard_uncertainty")
    at_centroid = np.array([1.0, 0.0])
    confident = decide(np.array([0.95, 0.05]), at_centroid, art, config)
    assert confident.outcome == CLEAR_NEGATIVE
    ambiguous = decide(np.array([0.5, 0.5]), at_centroid, art, config)
    assert ambiguous.outcome == DEFER and ambiguous.reason == REASON_AMBIGUOUS
    assert ambiguous.entropy == pytest.approx(math.log(2.0))


def test_clear_label_is_argmax_even_for_minority_set():
    # set contains only class 0 but argmax is class 1: still labeled by argmax
    art = handmade_artifact(scores0=[0.9] * 4, scores1=[0.01] * 4, taus=(100.0, 100.0))
    d = decide(np.array([0.45, 0.55]), np.array([1.0, 0.0]), art, PolicyConfig(alpha=ALPHA))
    assert d.set_cardinality == 1 and d.predicted_class == 1
    assert d.outcome == CLEAR_POSITIVE


def test_decide_requires_geometry_for_epistemic_policies():
    art = dataclasses.replace(handmade_artifact(), geometry=None)
    with pytest.raises(errors.ConfigMismatch):
        decide(np.array([0.9, 0.1]), np.array([1.0, 0.0]), art, PolicyConfig(alpha=ALPHA))
    d = decide(
        np.array([0.9, 0.1]),
        np.array([1.0, 0.0]),
        art,
        PolicyConfig(alpha=ALPHA, policy_kind="aleatoric_only"),
    )
    assert d.outcome == CLEAR_NEGATIVE and math.isnan(d.d_m)


def test_policy_config_validation():
    with pytest.raises(errors.ConfigMismatch):
        PolicyConfig(alpha=1.5).validate()
    with pytest.raises(errors.ConfigMismatch):
        PolicyConfig(policy_kind="nonsense").validate()


def test_triage_empty_test_split():
    cohort, _ = small_synth(seed=1, n_test_per_class=(1, 1))
    test_ids = set(cohort.ids_in_split("test"))
    keep = np.array([s != "test" for s in cohort.split_base])
    trimmed = dataclasses.replace(
        cohort,
        ids=tuple(i for i in cohort.ids if i not in test_ids),
        split_base=cohort.split_base[keep],
        split_tags=cohort.split_tags[keep],
        labels=cohort.labels[keep],
        logits=cohort.logits[keep],
        embeddings=cohort.embeddings[keep],
    )
    trimmed = dataclasses.replace(trimmed, _index={})
    art = dv.fit_artifact(cohort)
    assert triage_cohort(trimmed, art, PolicyConfig()) == []


def test_triage_matches_decide_record_by_record():
    cohort, _ = small_synth(seed=2, n_val_per_class=(150, 150), n_test_per_class=(80, 80))
    art = dv.fit_artifact(cohort)
    config = PolicyConfig(alpha=0.1)
    probs, _ = dv.aggregate_members(cohort, art.temperature_map())
    batch = triage_cohort(cohort, art, config)
    assert [i for i, _ in batch] == sorted(i for i, _ in batch)
    for id_, d_batch in batch[:25]:
        i = cohort.index_of(id_)
        emb = dv.l2_normalize(cohort.embeddings[i, 0])
        d_single = decide(probs[i], emb, art, config)
        assert d_single.d_m == pytest.approx(d_batch.d_m, abs=1e-9)
        assert dataclasses.replace(d_single, d_m=0.0) == dataclasses.replace(d_batch, d_m=0.0)


def test_hybrid_is_exact_intersection():
    cohort, _ = small_synth(seed=3, ood_fraction=0.05, ood_displacement=10.0)
    art = dv.fit_artifact(cohort)
    clear_sets = {}
    for kind in ("hybrid", "aleatoric_only", "epistemic_only"):
        decisions = triage_cohort(cohort, art, PolicyConfig(alpha=0.05, policy_kind=kind))
        clear_sets[kind] = {i for i, d in decisions if d.outcome != DEFER}
    assert clear_sets["hybrid"] == clear_sets["aleatoric_only"] & clear_sets["epistemic_only"]
    assert len(clear_sets["hybrid"]) <= min(
        len(clear_sets["aleatoric_only"]), len(clear_sets["epistemic_only"])
    )


def test_alpha_monotone_clear_sets_on_synthetic_data():
    cohort, _ = small_synth(seed=4)
    art = dv.fit_artifact(cohort)
    clears = {}
    for alpha in (0.01, 0.05):
        decisions = triage_cohort(cohort, art, PolicyConfig(alpha=alpha))
        clears[alpha] = {i for i, d in decisions if d.outcome != DEFER}
    assert clears[0.01] <= clears[0.05]


def test_loose_gates_clear_everything():
    # every calibration score at 0.5 and tau=inf: any confident argmax
    # stays in the set alone, so all records clear
    art = handmade_artifact(
        scores0=[0.5] * 9, scores1=[0.5] * 9, taus=(math.inf, math.inf)
    )
    config = PolicyConfig(alpha=0.5)
    rng = np.random.default_rng(0)
    for _ in range(50):
        p1 = rng.uniform(0.75, 0.999)
        if rng.random() < 0.5:
            p1 = 1 - p1
        d = decide(np.array([1 - p1, p1]), np.array([0.6, 0.8]), art, config)
        assert d.outcome != DEFER
