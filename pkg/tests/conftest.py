import numpy as np
import pytest

import dualveto as dv
from dualveto.artifact import CalibrationArtifact
from dualveto.conformal import ConformalCalibrator
from dualveto.geometry import GeometricModel
from dualveto.temperature import TemperatureModel


def write_csv(path, text):
    path.write_text(text.strip() + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def tiny_cohort_csv(tmp_path):
    """3 ids, d=4, one member, one id per split."""
    return write_csv(
        tmp_path / "tiny.csv",
        """
id,split,label,member_id,logit_0,logit_1,e_0,e_1,e_2,e_3
p1,train,0,0,0.5,-0.5,1.0,0.0,0.0,0.0
p2,val,1,0,-1.5,1.5,0.0,1.0,0.0,0.0
p3,test,,0,0.25,-0.25,0.0,0.0,1.0,0.0
""",
    )


def handmade_artifact(
    scores0=(0.05, 0.1, 0.2, 0.3),
    scores1=(0.05, 0.1, 0.2, 0.3),
    centroids0=((1.0, 0.0),),
    centroids1=((0.0, 1.0),),
    taus=(0.5, 0.5),
    entropies=(0.1, 0.2, 0.3, 0.4, 0.5),
):
    """Small artifact with hand-chosen calibrators for rule-level tests."""
    geometry = GeometricModel(
        centroids=(np.asarray(centroids0, dtype=float), np.asarray(centroids1, dtype=float)),
        precision=np.eye(len(centroids0[0])),
        rho=0.0,
        taus=taus,
    )
    return CalibrationArtifact(
        temperatures={0: TemperatureModel(T=1.0, final_nll=0.0, iterations=0)},
        conformal=ConformalCalibrator(
            scores=(np.asarray(scores0, dtype=float), np.asarray(scores1, dtype=float))
        ),
        geometry=geometry,
        val_entropies=np.asarray(entropies, dtype=float),
        d=len(centroids0[0]),
        member_ids=(0,),
    )


def small_synth(seed=0, **overrides):
    """Small but non-trivial cohort for pipeline tests."""
    kwargs = dict(
        seed=seed,
        n_train_per_class=(10, 10),
        n_val_per_class=(300, 300),
        n_test_per_class=(600, 600),
        d=8,
        centroids_per_class=(1, 1),
        class_separation=2.0,
    )
    kwargs.update(overrides)
    return dv.generate(dv.SynthConfig(**kwargs))
