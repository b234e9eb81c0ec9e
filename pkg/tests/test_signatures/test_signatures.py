import numpy as np
import pytest

from app.core_model import BENIGN, AttackerLevel, Label, Layer, Packet, VOCABULARY, message_kind
from app.errors import RecordDecodeError
from app.signatures import (
    PltlMonitor,
    classify_with_signatures,
    eval_pltl,
    evasion_report,
    formula_to_str,
    get_signatures,
    holds,
    parse_signature,
    subformulas,
)
from app.pipeline import msa_layer_verdict
from app.simulator import ScenarioSpec, gen_benign, gen_msa, reshape


def packets(kinds, layer=Layer.NAS, fields=None):
    fields = fields or [{} for _ in kinds]
    return [Packet("s", i, layer, message_kind(layer, k), f, BENIGN) for i, (k, f) in enumerate(zip(kinds, fields))]


def signature(name):
    return next(s for s in get_signatures() if s.name == name)


def test_catalogue_covers_eight_attacks():
    """The shipped catalogue has eight signatures over distinct attacks."""
    signatures = get_signatures()
    assert len(signatures) == 8
    assert len({s.attack.id for s in signatures}) == 8


@pytest.mark.parametrize("representation", ["dfa", "mealy", "pltl"])
def test_attach_reject_detected_at_its_packet(representation):
    """A single-message signature fires on that message and nowhere else."""
    sig = signature("attach_reject")
    flow = packets(["AttachRequest", "AuthenticationRequest", "AttachReject", "AttachRequest"])
    assert sig.detect(representation, flow) == (True, 2)
    assert sig.detect(representation, packets(["AttachRequest", "AttachAccept"])) == (False, None)
    assert sig.detect(representation, []) == (False, None)


def test_benign_trace_fires_nothing():
    """A plain benign session matches no signature."""
    trace = gen_benign(ScenarioSpec(BENIGN, master_seed=42), 0)
    for representation in ("dfa", "mealy", "pltl"):
        assert classify_with_signatures(get_signatures(), representation, trace) is None


def test_numb_needs_missing_response():
    """AuthenticationReject alarms only when not preceded by AuthenticationResponse."""
    formula = signature("numb").formula
    steps, verdict = eval_pltl(formula, packets(["AuthenticationRequest", "AuthenticationReject"]))
    assert steps == [False, True]
    assert verdict
    steps, verdict = eval_pltl(formula, packets(["AuthenticationResponse", "AuthenticationReject"]))
    assert steps == [False, False]
    assert not verdict


def test_once_stays_true():
    """O(p) holds from the first p onward."""
    steps, _ = eval_pltl(("O", ("kind", "AttachRequest")), packets(["AttachRequest", "AttachAccept", "DetachRequest"]))
    assert steps == [True, True, True]
    steps, _ = eval_pltl(("H", ("kind", "AttachRequest")), packets(["AttachRequest", "AttachAccept", "AttachRequest"]))
    assert steps == [True, False, False]


def test_subformulas_are_post_ordered():
    """Children come before parents and shared subformulas appear once."""
    k = ("kind", "AttachRequest")
    formula = ("and", ("Y", k), ("O", k))
    order = subformulas(formula)
    assert order[0] == k
    assert order[-1] == formula
    assert len(order) == 4
    assert formula_to_str(formula) == "(Y(kind==AttachRequest) & O(kind==AttachRequest))"
    with pytest.raises(RecordDecodeError):
        subformulas(("X", k))


@pytest.mark.parametrize("layer", [Layer.NAS, Layer.RRC])
def test_representations_agree_on_random_traces(layer):
    """DFA, Mealy and PLTL give the same verdict and firing index."""
    rng = np.random.default_rng(7)
    sigs = [s for s in get_signatures() if s.layer == layer]
    alphabet = list(VOCABULARY[layer])
    for _ in range(200):
        flow = packets([alphabet[int(rng.integers(len(alphabet)))] for _ in range(int(rng.integers(0, 25)))], layer)
        for sig in sigs:
            expected = sig.detect("dfa", flow)
            assert sig.detect("mealy", flow) == expected
            assert sig.detect("pltl", flow) == expected


def test_monitor_matches_recomputation():
    """The incremental monitor equals satisfaction recomputed from scratch at every step."""
    a, b = ("kind", "TAURequest"), ("kind", "TAUReject")
    cause = ("field", "nas_eps_emm_cause", 9)
    formulas = [
        ("S", ("not", b), a),
        ("and", a, ("not", ("Y", b))),
        ("or", ("H", ("not", b)), ("O", cause)),
        ("Y", ("Y", ("true",))),
    ]
    rng = np.random.default_rng(3)
    pool = ["TAURequest", "TAUReject", "TAUAccept"]
    for _ in range(50):
        n = int(rng.integers(1, 12))
        kinds = [pool[int(rng.integers(3))] for _ in range(n)]
        fields = [{"nas_eps_emm_cause": 9} if k == "TAUReject" and rng.random() < 0.5 else {} for k in kinds]
        flow = packets(kinds, fields=fields)
        for formula in formulas:
            monitor = PltlMonitor(formula)
            assert [monitor.step(p) for p in flow] == [holds(formula, flow, i) for i in range(n)]


def test_malformed_signature_entry():
    """Unknown kinds and rule types fail to parse."""
    with pytest.raises(RecordDecodeError):
        parse_signature({"name": "x", "attack": 2, "layer": "NAS", "rule": {"type": "message", "kind": "Nope"}})
    with pytest.raises(RecordDecodeError):
        parse_signature({"name": "x", "attack": 2, "layer": "NAS", "rule": {"type": "regex", "kind": "AttachReject"}})


def test_original_attacks_hit_their_own_signature():
    """Every covered attack at level 3 is detected as itself."""
    for sig in get_signatures():
        trace = gen_msa(ScenarioSpec(Label.msa(sig.attack), AttackerLevel.MULTI_STEP, master_seed=21), 0)
        hit = classify_with_signatures(get_signatures(), "dfa", trace)
        assert hit is not None and hit.label == Label.msa(sig.attack), sig.name


def test_evasion_report_tau_reject():
    """Injected benign messages hide the TAU-reject attack behind an earlier alarm."""
    traces = []
    for level in (AttackerLevel.MULTI_STEP, AttackerLevel.RESHAPING):
        spec = ScenarioSpec(Label.msa(20), level, master_seed=5)
        traces += [gen_msa(spec, i) for i in range(4)]
    report = evasion_report(traces, classifier=lambda trace: Label.msa(20))

    entry = report["attacks"]["20"]
    assert entry["original"]["n"] == 4
    assert entry["reshaped"]["n"] == 4
    for representation in ("dfa", "mealy", "pltl"):
        assert entry["original"][representation] == 1.0
        assert entry["reshaped"][representation] == 0.0
    assert entry["reshaped"]["graph"] == 1.0
    assert report["attacks"]["2"]["original"]["dfa"] is None


@pytest.mark.slow
def test_graph_model_recovers_reshaped_attacks(msa_desk):
    """Fifty reshapes of each covered attack: the nearest-attack verdict names the original on 80% or more."""
    _, _, bundle = msa_desk
    recovered = total = 0
    traces = []
    for sig in get_signatures():
        own = Label.msa(sig.attack)
        for k in range(50):
            original = gen_msa(ScenarioSpec(own, AttackerLevel.MULTI_STEP, master_seed=500 + k), 0)
            reshaped = reshape(original, seed=k)
            assert reshaped.attacker_level == AttackerLevel.RESHAPING
            traces.append(reshaped)
            verdict = msa_layer_verdict(bundle.layers[sig.layer], reshaped, tau=0.5)
            recovered += int(verdict.prediction.label == own)
            total += 1
    assert total == 50 * len(get_signatures())
    assert recovered / total >= 0.80

    report = evasion_report(traces)
    for entry in report["attacks"].values():
        assert entry["reshaped"]["n"] == 50
