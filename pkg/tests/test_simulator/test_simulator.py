import pytest

from app.core_model import (
    BENIGN,
    FBS,
    AttackerLevel,
    Label,
    LabelKind,
    Layer,
    split_layer,
    validate,
)
from app.errors import InvalidScenario, NotAnAttackTrace
from app.schemas import trace_to_line
from app.simulator import (
    ScenarioSpec,
    gen_benign,
    gen_dataset,
    gen_fbs,
    gen_msa,
    load_scenarios,
    reshape,
)

BENIGN_NAS = [
    "AttachRequest", "AuthenticationRequest", "AuthenticationResponse", "SecurityModeCommand",
    "SecurityModeComplete", "AttachAccept", "AttachComplete", "EMMInformation", "DetachRequest",
]


def nas_kinds(trace):
    return split_layer(trace, Layer.NAS).kinds


def test_benign_session_script():
    """Without mobility or noise the NAS side is the fixed attach/detach session."""
    trace = gen_benign(ScenarioSpec(BENIGN, master_seed=42), 0)
    assert nas_kinds(trace) == BENIGN_NAS
    assert all(p.label == BENIGN for p in trace.packets)
    assert validate(trace) == []


def test_benign_mobility_adds_tau():
    """Mobility inserts at least one TAURequest/TAUAccept pair."""
    kinds = nas_kinds(gen_benign(ScenarioSpec(BENIGN, mobility=True, master_seed=42), 0))
    pairs = list(zip(kinds, kinds[1:]))
    assert ("TAURequest", "TAUAccept") in pairs


def test_generation_is_deterministic():
    """Same seed and index give byte-identical traces; another index differs."""
    spec = ScenarioSpec(FBS, AttackerLevel.CLONED_CELL, master_seed=42)
    assert trace_to_line(gen_fbs(spec, 3)) == trace_to_line(gen_fbs(spec, 3))
    assert trace_to_line(gen_fbs(spec, 3)) != trace_to_line(gen_fbs(spec, 4))


def test_fbs_trace_labels():
    """FBS traces are valid and carry Fbs-labeled packets after a benign prefix."""
    for level in (AttackerLevel.NAIVE, AttackerLevel.OPTIMAL_SIGNAL, AttackerLevel.CLONED_CELL):
        trace = gen_fbs(ScenarioSpec(FBS, level, master_seed=5), 0)
        assert validate(trace) == []
        assert trace.packets[0].label == BENIGN
        assert any(p.label == FBS for p in trace.packets)
        assert "IdentityRequest" in nas_kinds(trace)


def test_msa_tau_reject_script():
    """The TAU-reject attack answers a TAURequest with a TAUReject carrying a cause."""
    trace = gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.MULTI_STEP, master_seed=9), 0)
    nas = split_layer(trace, Layer.NAS).packets
    assert validate(trace) == []
    pairs = [(a.kind.name, b.kind.name) for a, b in zip(nas, nas[1:])]
    assert ("TAURequest", "TAUReject") in pairs
    reject = next(p for p in nas if p.kind.name == "TAUReject")
    assert reject.label == Label.msa(20)
    assert reject.fields.get("nas_eps_emm_cause") is not None


def test_msa_imsi_catching_before_security():
    """IMSI catching sends an IdentityRequest to a UE that never completes security mode with the fake cell."""
    trace = gen_msa(ScenarioSpec(Label.msa(14), AttackerLevel.MULTI_STEP, master_seed=9), 0)
    kinds = nas_kinds(trace)
    attack_nas = [p.kind.name for p in split_layer(trace, Layer.NAS).packets if p.label.is_attack]
    assert "IdentityRequest" in attack_nas
    last_identity = len(kinds) - 1 - kinds[::-1].index("IdentityRequest")
    assert "SecurityModeComplete" not in kinds[last_identity:]


def test_msa_measurement_report_attack_uses_ue_information():
    """Location tracking via measurement reports exchanges ueInformationRequest/Response on RRC."""
    trace = gen_msa(ScenarioSpec(Label.msa(4), AttackerLevel.MULTI_STEP, master_seed=9), 0)
    kinds = split_layer(trace, Layer.RRC).kinds
    assert "ueInformationRequest" in kinds
    assert "ueInformationResponse" in kinds


def test_reshape_keeps_attack_kinds():
    """Reshaping keeps every attack packet's kind and adds benign packets before the attack."""
    original = gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.MULTI_STEP, master_seed=9), 0)
    reshaped = reshape(original, seed=123)
    assert reshaped.attacker_level == AttackerLevel.RESHAPING
    assert [p.kind.name for p in reshaped.packets if p.label.is_attack] == \
           [p.kind.name for p in original.packets if p.label.is_attack]
    assert len(reshaped) > len(original)
    assert [p.seq for p in reshaped.packets] == list(range(len(reshaped)))
    assert validate(reshaped) == []


def test_reshape_benign_trace_fails():
    """Benign traces have nothing to reshape."""
    with pytest.raises(NotAnAttackTrace):
        reshape(gen_benign(ScenarioSpec(BENIGN), 0), seed=1)


def test_level_four_msa_is_reshaped():
    """Level 4 generation produces reshaped traces."""
    trace = gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.RESHAPING, master_seed=9), 0)
    assert trace.attacker_level == AttackerLevel.RESHAPING
    assert "IdentityRequest" in nas_kinds(trace)


def test_invalid_scenarios():
    """Level/scenario combinations outside the model are rejected."""
    with pytest.raises(InvalidScenario):
        ScenarioSpec(Label.msa(2), AttackerLevel.CLONED_CELL)
    with pytest.raises(InvalidScenario):
        ScenarioSpec(FBS, AttackerLevel.MULTI_STEP)
    with pytest.raises(InvalidScenario):
        ScenarioSpec(BENIGN, n_traces=0)
    with pytest.raises(InvalidScenario):
        ScenarioSpec.from_dict({"scenario": "msa"})


def test_dataset_manifest():
    """Manifest counts traces per class."""
    specs = [ScenarioSpec(BENIGN, n_traces=10), ScenarioSpec(FBS, AttackerLevel.CLONED_CELL, n_traces=10)]
    dataset = gen_dataset(specs, workers=1)
    assert dataset.manifest.n_traces == 20
    assert dataset.manifest.traces_per_class == {"Benign": 10, "Fbs": 10}


def test_dataset_independent_of_workers():
    """Concurrent generation yields the same traces in the same order."""
    specs = [ScenarioSpec(BENIGN, n_traces=3), ScenarioSpec(Label.msa(8), AttackerLevel.MULTI_STEP, n_traces=3)]
    serial = [trace_to_line(t) for t in gen_dataset(specs, workers=1).traces]
    threaded = [trace_to_line(t) for t in gen_dataset(specs, workers=3).traces]
    assert serial == threaded


def test_load_scenarios_from_yaml(tmp_path):
    """Scenario files name classes, attacks by id or name, and a master seed."""
    path = tmp_path / "scenarios.yaml"
    path.write_text(
        "master_seed: 99\n"
        "scenarios:\n"
        "  - {scenario: benign, traces: 2}\n"
        "  - {scenario: msa, attack: IMSI catching, level: 4, traces: 1}\n"
    )
    specs = load_scenarios(str(path))
    assert len(specs) == 2
    assert specs[0].master_seed == 99
    assert specs[1].scenario.kind == LabelKind.MSA
    assert specs[1].scenario.attack.id == 14
    assert specs[1].attacker_level == AttackerLevel.RESHAPING
