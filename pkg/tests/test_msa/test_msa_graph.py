import numpy as np
import pytest

from app.core_model import BENIGN, AttackerLevel, Label, Layer, Packet, Trace, attack_by_id, message_kind
from app.errors import EmptyInput, MissingClass, MixedLayerInput, UnknownAttack, UntrainedModel
from app.metrics import compute_metrics
from app.msa_graph import (
    AttackPathBank,
    SageConfig,
    SageModel,
    build_graph,
    graph_of,
    graph_tensors,
    nearest_attack,
    overlap_score,
    predict_attack,
    predict_edges,
    train_msa,
)
from app.pipeline import evaluate, holdout_eval, trace_graphs
from app.simulator import ScenarioSpec, gen_benign, gen_msa, reshape

NAS_POOL = ["AttachRequest", "AuthenticationRequest", "AuthenticationResponse", "TAURequest", "TAUReject"]


def packets(kinds, labels=None, layer=Layer.NAS):
    labels = labels or [BENIGN] * len(kinds)
    return [Packet("g", i, layer, message_kind(layer, k), {}, l) for i, (k, l) in enumerate(zip(kinds, labels))]


def brute_force_edges(seq):
    edges = {}
    for a, b in zip(seq, seq[1:]):
        key = (a.kind.name, b.kind.name)
        edges.setdefault(key, []).append(b.label)
    return edges


def test_three_packet_graph():
    """Three distinct kinds give three nodes and two edges."""
    graph = build_graph(packets(["AttachRequest", "AuthenticationRequest", "AuthenticationResponse"]))
    assert len(graph.nodes) == 3
    assert graph.n_edges == 2


def test_single_packet_graph():
    """One packet is one node and no edge."""
    graph = build_graph(packets(["AttachRequest"]))
    assert graph.nodes == ["AttachRequest"]
    assert graph.n_edges == 0


def test_build_graph_matches_brute_force():
    """On 200 random sequences of 2-20 packets, edges, multiplicities and label multisets match a direct pair count."""
    rng = np.random.default_rng(4)
    labels = [BENIGN, Label.msa(20)]
    for _ in range(200):
        n = int(rng.integers(2, 21))
        seq = packets([NAS_POOL[int(rng.integers(len(NAS_POOL)))] for _ in range(n)],
                      [labels[int(rng.integers(2))] for _ in range(n)])
        graph = build_graph(seq)
        expected = brute_force_edges(seq)
        assert set(graph.edges) == set(expected)
        for key, stats in graph.edges.items():
            assert stats.count == len(expected[key])
            assert sum(stats.labels.values()) == len(expected[key])
        assert sorted(graph.nodes) == sorted({p.kind.name for p in seq})


def test_edge_target_ties_go_to_attack():
    """A tied label multiset resolves to the higher class code."""
    graph = build_graph(packets(["TAURequest", "TAUReject", "TAURequest", "TAUReject"],
                                [BENIGN, BENIGN, BENIGN, Label.msa(20)]))
    stats = graph.edges[("TAURequest", "TAUReject")]
    assert stats.count == 2
    assert stats.target == Label.msa(20)


def test_build_graph_errors():
    """Empty and mixed-layer inputs are rejected."""
    with pytest.raises(EmptyInput):
        build_graph([])
    mixed = packets(["AttachRequest"]) + packets(["rrcConnectionSetup"], layer=Layer.RRC)
    with pytest.raises(MixedLayerInput):
        build_graph(mixed)


def test_tau_reject_trace_edge_label():
    """The TAU-reject attack graph has a TAURequest -> TAUReject edge labeled with the attack."""
    trace = gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.MULTI_STEP, master_seed=3), 0)
    graph = graph_of(trace, Layer.NAS)
    assert graph.edges[("TAURequest", "TAUReject")].target == Label.msa(20)


def test_log_probabilities_normalised():
    """Edge head rows are log-probabilities over the 22 classes."""
    trace = gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.MULTI_STEP, master_seed=3), 0)
    graph = graph_of(trace, Layer.NAS)
    model = SageModel(Layer.NAS, SageConfig(hidden=8, seed=0))
    keys, log_probs = model.edge_log_probs(graph)
    assert len(keys) == graph.n_edges
    assert log_probs.shape == (graph.n_edges, 22)
    np.testing.assert_allclose(np.exp(log_probs).sum(axis=1), 1.0)


def test_node_features_and_tensors():
    """Tensors index edges by node position and carry count/position features."""
    graph = build_graph(packets(["AttachRequest", "TAURequest", "TAUReject", "TAURequest", "TAUReject"]))
    t = graph_tensors(graph)
    assert t.X.shape[0] == len(graph.nodes)
    assert t.edge_feats.shape == (graph.n_edges, 2)
    row = t.keys.index(("TAURequest", "TAUReject"))
    assert t.edge_feats[row, 0] == pytest.approx(np.log1p(2))
    np.testing.assert_allclose(t.A.sum(axis=1), 1.0)


def test_single_class_training_fails():
    """A benign-only training set misses the attack classes."""
    graphs = [build_graph(packets(["AttachRequest", "AuthenticationRequest"]))]
    with pytest.raises(MissingClass):
        train_msa(graphs, SageConfig(hidden=4, epochs=1))


def test_training_lowers_loss():
    """Training on a two-class toy set reduces the edge NLL."""
    graphs = [
        build_graph(packets(["AttachRequest", "AuthenticationRequest", "AuthenticationResponse"])),
        build_graph(packets(["TAURequest", "TAUReject"], [BENIGN, Label.msa(20)])),
    ]
    model, bank, history = train_msa(graphs, SageConfig(hidden=8, epochs=100, lr=0.2, seed=1),
                                     require_classes=[0, 20])
    assert history[-1] < history[0]
    assert bank.attacks() == [20]
    assert predict_attack(model, graphs[1]).label == Label.msa(20)
    labels = {label for label, _ in predict_edges(model, graphs[0]).values()}
    assert labels == {BENIGN}


def test_empty_graph_is_benign():
    """A graph without edges is Benign by definition; no model means no verdict."""
    graph = build_graph(packets(["AttachRequest"]))
    prediction = predict_attack(SageModel(Layer.NAS, SageConfig(hidden=4)), graph)
    assert prediction.label == BENIGN
    assert prediction.confidence == 1.0
    with pytest.raises(UntrainedModel):
        predict_attack(None, graph)


def test_overlap_scores():
    """Containment gives 1.0, a benign graph only its shared edges, unknown attacks fail."""
    trace = gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.MULTI_STEP, master_seed=3), 0)
    graph = graph_of(trace, Layer.NAS)
    bank = AttackPathBank(Layer.NAS)
    bank.add_graph(graph)
    attack = attack_by_id(20)
    assert overlap_score(graph, attack, bank) == 1.0

    benign = build_graph(packets(["AttachRequest", "AuthenticationRequest", "TAURequest", "TAUReject"]))
    expected = len(benign.edge_set() & bank.paths[20]) / len(bank.paths[20])
    assert overlap_score(benign, attack, bank) == pytest.approx(expected)
    assert overlap_score(benign, attack, bank) < 1.0

    with pytest.raises(UnknownAttack):
        overlap_score(graph, attack_by_id(3), bank)


def test_reshaped_tau_reject_overlaps_its_own_path(msa_traces, msa_bundle):
    """Reshaped TAU-reject traces stay closest to the TAU-reject path."""
    bank = msa_bundle.layers[Layer.NAS].msa_bank
    wins = 0
    for k in range(10):
        original = gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.MULTI_STEP, master_seed=100 + k), 0)
        graph = graph_of(reshape(original, seed=k), Layer.NAS)
        scores = {a: overlap_score(graph, attack_by_id(a), bank) for a in bank.attacks()}
        others = [s for a, s in scores.items() if a != 20]
        wins += int(scores[20] >= 0.5 and all(scores[20] > s for s in others))
    assert wins >= 8


def test_nearest_attack_on_benign_graph(msa_traces, msa_bundle):
    """A benign graph under the trained model is Benign and not a variant."""
    artifacts = msa_bundle.layers[Layer.NAS]
    benign = [t for t in msa_traces if t.scenario == BENIGN][0]
    verdict = nearest_attack(artifacts.msa_sage, graph_of(benign, Layer.NAS), artifacts.msa_bank, tau=0.9)
    assert verdict.prediction.label == BENIGN
    assert verdict.variant is False


def test_bank_round_trip(tmp_path, msa_bundle):
    """Saved models and banks reload unchanged."""
    artifacts = msa_bundle.layers[Layer.NAS]
    artifacts.msa_bank.save(str(tmp_path / "bank.json"))
    artifacts.msa_sage.save(str(tmp_path / "sage.json"))
    bank = AttackPathBank.load(str(tmp_path / "bank.json"))
    assert bank.paths == artifacts.msa_bank.paths
    model = SageModel.load(str(tmp_path / "sage.json"))
    for name in model.params:
        np.testing.assert_array_equal(model.params[name], artifacts.msa_sage.params[name])


def test_trace_graphs_skip_empty_layers():
    """Traces without packets on a layer contribute no graph."""
    trace = Trace("t", BENIGN, AttackerLevel.NAIVE, 0, False, tuple(packets(["AttachRequest", "AttachAccept"])))
    assert trace_graphs([trace], Layer.RRC) == []
    assert len(trace_graphs([trace], Layer.NAS)) == 1


@pytest.mark.slow
def test_trained_model_recognises_tau_reject(msa_bundle):
    """A fresh TAU-reject trace is classified as that attack; a fresh benign one as Benign."""
    artifacts = msa_bundle.layers[Layer.NAS]
    trace = gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.MULTI_STEP, master_seed=777), 0)
    assert predict_attack(artifacts.msa_sage, graph_of(trace, Layer.NAS)).label == Label.msa(20)


@pytest.mark.slow
def test_edge_macro_accuracy_on_unseen_traces(msa_desk):
    """Five unseen traces per class: edge macro-accuracy of at least 0.80 over both layers."""
    _, test, bundle = msa_desk
    predicted, truth = [], []
    for layer in (Layer.NAS, Layer.RRC):
        model = bundle.layers[layer].msa_sage
        for graph in trace_graphs(test, layer):
            for key, (label, _) in predict_edges(model, graph).items():
                predicted.append(str(label))
                truth.append(str(graph.edges[key].target))
    metrics = compute_metrics(predicted, truth, classes=sorted(set(truth)))
    assert metrics.recall >= 0.80


@pytest.mark.slow
def test_trace_verdicts_on_unseen_traces(msa_desk):
    """Fused trace verdicts on five unseen traces per class are right at least 80% of the time."""
    _, test, bundle = msa_desk
    report, _ = evaluate(bundle, test, "msa")
    assert report["n_traces"] == 5 * 22
    assert report["trace"]["accuracy"] >= 0.80


@pytest.mark.slow
def test_held_out_attacks_are_not_benign(msa_desk):
    """An attack left out of training still draws a non-Benign verdict on at least 70% of its traces."""
    train, _, _ = msa_desk
    config = SageConfig(hidden=16, epochs=30, lr=0.2, seed=31)
    hits = n = 0
    for layer in (Layer.NAS, Layer.RRC):
        report = holdout_eval(train, layer, config, tau=0.5)
        for entry in report["attacks"].values():
            hits += entry["non_benign"] * entry["n"]
            n += entry["n"]
    assert n > 0
    assert hits / n >= 0.70


def test_holdout_skips_attacks_missing_from_the_layer():
    """Only classes seen on the layer are required, so a two-class set can still be evaluated."""
    traces = [gen_benign(ScenarioSpec(BENIGN, master_seed=3), i) for i in range(2)]
    traces += [gen_msa(ScenarioSpec(Label.msa(20), AttackerLevel.MULTI_STEP, master_seed=3), i) for i in range(3)]
    report = holdout_eval(traces, Layer.NAS, SageConfig(hidden=4, epochs=2, seed=0), attacks=[14, 20])
    assert list(report["attacks"]) == ["20"]
    assert report["attacks"]["20"]["n"] == 3
