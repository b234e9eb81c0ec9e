import pytest

from app.core_model import BENIGN, FBS, AttackerLevel, Label, Layer
from app.errors import LabelSpaceMismatch, ValidationError
from app.fbs_detect import PacketModelConfig, Prediction
from app.fusion import fuse, fuse_exhaustive_check, support_score
from app.pipeline import ModelBundle, evaluate, train_fbs_layer
from app.simulator import ScenarioSpec, gen_dataset


def nas(label, confidence, trace_id=None):
    return Prediction(label, confidence, Layer.NAS, trace_id)


def rrc(label, confidence, trace_id=None):
    return Prediction(label, confidence, Layer.RRC, trace_id)


@pytest.mark.parametrize("p_nas,p_rrc,label,winner", [
    (nas(FBS, 0.8), rrc(FBS, 0.6), FBS, Layer.NAS),
    (nas(FBS, 0.9), rrc(BENIGN, 0.7), FBS, Layer.NAS),
    (nas(BENIGN, 0.6), rrc(FBS, 0.8), FBS, Layer.RRC),
    (nas(Label.msa(20), 0.4), rrc(Label.msa(14), 0.7), Label.msa(14), Layer.RRC),
])
def test_fuse_cases(p_nas, p_rrc, label, winner):
    """Agreement keeps the label; disagreement goes to the heavier layer."""
    verdict = fuse(p_nas, p_rrc)
    assert verdict.label == label
    assert verdict.winner == winner


def test_tie_goes_to_nas():
    """Equal weights on different labels resolve to the NAS label."""
    verdict = fuse(nas(BENIGN, 0.5), rrc(FBS, 0.5))
    assert verdict.label == BENIGN
    assert verdict.winner == Layer.NAS
    assert verdict.to_record().winner == "NAS"


def test_fuse_rejects_mixed_inputs():
    """Fbs cannot meet Msa, and two different traces cannot be fused."""
    with pytest.raises(LabelSpaceMismatch):
        fuse(nas(FBS, 0.9), rrc(Label.msa(20), 0.9))
    with pytest.raises(ValidationError):
        fuse(nas(FBS, 0.9, "a"), rrc(FBS, 0.9, "b"))


def test_support_score_is_confidence():
    """The fusion weight is the prediction confidence."""
    assert support_score(nas(FBS, 0.9)) == 0.9
    assert support_score(nas(FBS, 0.0)) == 0.0
    with pytest.raises(ValidationError):
        support_score(nas(FBS, 1.5))


def test_exhaustive_check():
    """Every label and weight pair agrees with the case rule, ties included."""
    result = fuse_exhaustive_check()
    assert result["mismatches"] == 0
    assert result["ties"] > 0
    assert result["checked"] == (2 * 2 + 22 * 22) * 21 * 21


@pytest.mark.slow
def test_fusion_does_not_lose_to_either_layer():
    """On unseen benign and FBS level 0-2 traces the fused verdict is within 0.01 of the best single layer."""
    def dataset(n_benign, n_per_level, seed):
        specs = [ScenarioSpec(BENIGN, n_traces=n_benign, master_seed=seed)]
        specs += [ScenarioSpec(FBS, level, n_traces=n_per_level, master_seed=seed)
                  for level in (AttackerLevel.NAIVE, AttackerLevel.OPTIMAL_SIGNAL, AttackerLevel.CLONED_CELL)]
        return gen_dataset(specs, workers=1).traces

    train, test = dataset(30, 10, seed=41), dataset(30, 10, seed=42)
    config = PacketModelConfig(hidden=12, len_seq=12, epochs=15, lr=0.2, seed=41)
    bundle = ModelBundle({layer: train_fbs_layer(train, layer, config) for layer in (Layer.NAS, Layer.RRC)})

    report, verdicts = evaluate(bundle, test, "fbs", use_fusion=True)
    assert all(v.fusion is not None for v in verdicts)
    single = max(report["layers"][layer.value]["trace"]["accuracy"] for layer in (Layer.NAS, Layer.RRC))
    assert report["trace"]["accuracy"] >= single - 0.01
