#!/usr/bin/env python3
"""
Training, evaluation and detection flows shared by the CLI and the service.

Model artifacts of one layer live side by side in a model directory:
    {layer}_codebook.json    {layer}_fbs_packet.json    {layer}_fbs_trace.json
    {layer}_msa_sage.json    {layer}_msa_bank.json
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.core_model import (
    ATTACKS,
    BENIGN,
    DatasetKind,
    Label,
    LabelKind,
    Layer,
    Packet,
    SCHEMAS,
    Trace,
    label_code,
    message_kind,
    split_layer,
)
from app.errors import ArtifactIOError, UntrainedModel, ValidationError
from app.fbs_detect import (
    ConstantPacketModel,
    PacketModel,
    PacketModelConfig,
    Prediction,
    TraceModel,
    TraceModelConfig,
    predict_trace,
    trace_features,
    train_packet_model,
    train_trace_model,
)
from app.featurize import Codebook, InputLayout, encode, window
from app.fusion import fuse
from app.metrics import compute_metrics
from app.msa_graph import (
    AttackPathBank,
    FlowGraph,
    NearestVerdict,
    SageConfig,
    SageModel,
    build_graph,
    graph_of,
    graph_tensors,
    nearest_attack,
    train_msa,
)
from app.numkernel import (
    ParamSet,
    attended_output,
    attended_output_backward,
    attention,
    attention_backward,
    dense,
    dense_backward,
    grad_check,
    lstm_cell,
    lstm_cell_backward,
    mse_loss,
)
from app.schemas import FusionRecord, LayerVerdictRecord, VerdictRecord
from app.signatures import evasion_report, get_signatures

logger = logging.getLogger(__name__)

LAYERS = (Layer.NAS, Layer.RRC)
TASKS = ("fbs", "msa")

ARTIFACTS = {
    "codebook": Codebook,
    "fbs_packet": PacketModel,
    "fbs_trace": TraceModel,
    "msa_sage": SageModel,
    "msa_bank": AttackPathBank,
}


def artifact_path(model_dir: str, layer: Layer, name: str) -> Path:
    return Path(model_dir) / f"{layer.value.lower()}_{name}.json"


@dataclass
class LayerArtifacts:
    layer: Layer
    codebook: Optional[Codebook] = None
    fbs_packet: Optional[PacketModel] = None
    fbs_trace: Optional[TraceModel] = None
    msa_sage: Optional[SageModel] = None
    msa_bank: Optional[AttackPathBank] = None

    def supports(self, task: str) -> bool:
        if task == "fbs":
            return None not in (self.codebook, self.fbs_packet, self.fbs_trace)
        return None not in (self.msa_sage, self.msa_bank)


class ModelBundle:
    """Every artifact found in a model directory, per layer."""

    def __init__(self, layers: Optional[Dict[Layer, LayerArtifacts]] = None):
        self.layers = layers or {layer: LayerArtifacts(layer) for layer in LAYERS}

    @classmethod
    def load(cls, model_dir: str) -> "ModelBundle":
        """
        Load whatever artifacts exist under model_dir.

        Raises:
            ArtifactIOError: the directory holds no artifact at all
        """
        bundle = cls()
        found = 0
        for layer in LAYERS:
            for name, kind in ARTIFACTS.items():
                path = artifact_path(model_dir, layer, name)
                if path.exists():
                    setattr(bundle.layers[layer], name, kind.load(str(path)))
                    found += 1
        if found == 0:
            raise ArtifactIOError(f"No model artifacts found in {model_dir}")
        logger.info(f"✅ Loaded {found} model artifacts from {model_dir}")
        return bundle

    def save(self, model_dir: str) -> None:
        for layer, artifacts in self.layers.items():
            for name in ARTIFACTS:
                artifact = getattr(artifacts, name)
                if artifact is not None:
                    artifact.save(str(artifact_path(model_dir, layer, name)))

    def layers_for(self, task: str) -> List[Layer]:
        return [layer for layer in LAYERS if self.layers[layer].supports(task)]


# ---------------------------------------------------------------------------
# Per-layer inference
# ---------------------------------------------------------------------------

def packet_probabilities(artifacts: LayerArtifacts, trace: Trace, stride: Optional[int] = None) -> np.ndarray:
    """Per-packet FBS probabilities for the trace's packets of one layer."""
    sub = split_layer(trace, artifacts.layer)
    if not sub.packets:
        return np.zeros(0)
    matrix, _ = encode([sub], artifacts.layer, artifacts.codebook, with_labels=False)
    model = artifacts.fbs_packet
    return model.predict_codes(matrix.codes(), stride=stride or model.config.train_stride)


def fbs_layer_verdict(artifacts: LayerArtifacts, trace: Trace,
                      stride: Optional[int] = None) -> Tuple[Prediction, np.ndarray]:
    probs = packet_probabilities(artifacts, trace, stride)
    features = trace_features(probs, trace, artifacts.layer)
    return predict_trace(artifacts.fbs_trace, features, trace.trace_id), probs


def msa_layer_verdict(artifacts: LayerArtifacts, trace: Trace, tau: float = 0.5) -> NearestVerdict:
    graph = graph_of(trace, artifacts.layer)
    if graph is None:
        return NearestVerdict(Prediction(BENIGN, 1.0, artifacts.layer, trace.trace_id), 0.0, False)
    return nearest_attack(artifacts.msa_sage, graph, artifacts.msa_bank, tau, trace.trace_id)


def detect_trace(bundle: ModelBundle, trace: Trace, task: str = "fbs",
                 use_fusion: bool = True, tau: float = 0.5,
                 stride: Optional[int] = None) -> VerdictRecord:
    """
    Verdict for one trace from every layer the bundle can serve for the task.

    With both layers available and use_fusion set, the final label is the
    fused verdict; otherwise the single (or NAS) layer verdict is used.

    Raises:
        UntrainedModel: no layer has the artifacts the task needs
    """
    if task not in TASKS:
        raise ValidationError(f"Unknown task {task!r}; expected one of {TASKS}")
    layers = bundle.layers_for(task)
    if not layers:
        raise UntrainedModel(f"No trained {task} models available")

    predictions: Dict[Layer, Prediction] = {}
    records: Dict[str, LayerVerdictRecord] = {}
    for layer in layers:
        artifacts = bundle.layers[layer]
        if task == "fbs":
            prediction, probs = fbs_layer_verdict(artifacts, trace, stride)
            record = LayerVerdictRecord(label=str(prediction.label), confidence=prediction.confidence,
                                        per_packet=[float(p) for p in probs])
        else:
            nearest = msa_layer_verdict(artifacts, trace, tau)
            prediction = nearest.prediction
            record = LayerVerdictRecord(label=str(prediction.label), confidence=prediction.confidence,
                                        overlap=nearest.overlap, variant=nearest.variant)
        predictions[layer] = prediction
        records[layer.value] = record

    fusion: Optional[FusionRecord] = None
    if use_fusion and len(predictions) == 2:
        fused = fuse(predictions[Layer.NAS], predictions[Layer.RRC])
        label, confidence, fusion = fused.label, fused.confidence, fused.to_record()
    else:
        chosen = predictions[layers[0]]
        label, confidence = chosen.label, chosen.confidence

    return VerdictRecord(trace_id=trace.trace_id, task=task, label=str(label),
                         confidence=confidence, layers=records, fusion=fusion)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def fbs_trace_label(trace: Trace) -> int:
    return label_code(trace.scenario, DatasetKind.FBS)


def train_fbs_packet(traces: Sequence[Trace], layer: Layer,
                     config: PacketModelConfig) -> Tuple[Codebook, PacketModel, List[float]]:
    matrix, codebook = encode(traces, layer)
    layout = InputLayout.fit(matrix)
    windows = window(matrix, config.len_seq, config.train_stride)
    model, history = train_packet_model(windows, layout, config)
    return codebook, model, history


def fbs_feature_matrix(artifacts: LayerArtifacts, traces: Sequence[Trace]) -> np.ndarray:
    rows = [trace_features(packet_probabilities(artifacts, t), t, artifacts.layer) for t in traces]
    return np.array(rows).reshape(len(rows), -1)


def train_fbs_trace(traces: Sequence[Trace], artifacts: LayerArtifacts,
                    config: TraceModelConfig) -> Tuple[TraceModel, List[float]]:
    if artifacts.codebook is None or artifacts.fbs_packet is None:
        raise UntrainedModel(f"{artifacts.layer.value} packet model and codebook are required")
    features = fbs_feature_matrix(artifacts, traces)
    labels = [fbs_trace_label(t) for t in traces]
    return train_trace_model(features, labels, artifacts.layer, config)


def train_fbs_layer(traces: Sequence[Trace], layer: Layer, packet_config: PacketModelConfig,
                    trace_config: Optional[TraceModelConfig] = None) -> LayerArtifacts:
    codebook, packet_model, _ = train_fbs_packet(traces, layer, packet_config)
    artifacts = LayerArtifacts(layer, codebook=codebook, fbs_packet=packet_model)
    artifacts.fbs_trace, _ = train_fbs_trace(traces, artifacts, trace_config or TraceModelConfig())
    return artifacts


def ablate_packet_models(bundle: ModelBundle, traces: Sequence[Trace], value: float = 0.5,
                         config: Optional[TraceModelConfig] = None) -> ModelBundle:
    """
    Copy of the fbs side of a bundle with every packet model replaced by a
    constant and the trace models retrained on `traces` against it.
    """
    layers = {}
    for layer in bundle.layers_for("fbs"):
        source = bundle.layers[layer]
        artifacts = LayerArtifacts(layer, codebook=source.codebook, fbs_packet=ConstantPacketModel(layer, value))
        artifacts.fbs_trace, _ = train_fbs_trace(traces, artifacts, config or TraceModelConfig())
        layers[layer] = artifacts
    if not layers:
        raise UntrainedModel("No trained fbs layers to ablate")
    logger.info(f"⚠️ Packet models of {[l.value for l in layers]} replaced by constant {value}")
    return ModelBundle({layer: layers.get(layer, LayerArtifacts(layer)) for layer in LAYERS})


def trace_graphs(traces: Sequence[Trace], layer: Layer) -> List[FlowGraph]:
    return [g for g in (graph_of(t, layer) for t in traces) if g is not None]


def train_msa_layer(traces: Sequence[Trace], layer: Layer, config: SageConfig,
                    require_classes: Optional[Iterable[int]] = None
                    ) -> Tuple[SageModel, AttackPathBank, List[float]]:
    return train_msa(trace_graphs(traces, layer), config, require_classes)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def packet_metrics(artifacts: LayerArtifacts, traces: Sequence[Trace]) -> Dict[str, Any]:
    predicted, truth = [], []
    for trace in traces:
        probs = packet_probabilities(artifacts, trace)
        packets = split_layer(trace, artifacts.layer).packets
        predicted.extend(int(p > 0.5) for p in probs)
        truth.extend(label_code(p.label, DatasetKind.FBS) for p in packets)
    if not truth:
        return {}
    return compute_metrics(predicted, truth, classes=[0, 1]).to_dict()


def evaluate(bundle: ModelBundle, traces: Sequence[Trace], task: str = "fbs",
             use_fusion: bool = True, tau: float = 0.5) -> Tuple[Dict[str, Any], List[VerdictRecord]]:
    """
    Batch evaluation: trace verdicts plus metrics.

    Returns:
        (report, verdicts in input order). The report holds trace-level
        metrics for the final verdict and for each layer alone, per
        attacker-level accuracy, and (fbs task) packet-level metrics.
    """
    verdicts = [detect_trace(bundle, t, task, use_fusion, tau) for t in traces]
    truth = [str(t.scenario) for t in traces]
    report: Dict[str, Any] = {
        "task": task,
        "n_traces": len(traces),
        "trace": compute_metrics([v.label for v in verdicts], truth).to_dict(),
        "layers": {},
    }
    for layer in bundle.layers_for(task):
        layer_labels = [v.layers[layer.value].label for v in verdicts]
        entry = {"trace": compute_metrics(layer_labels, truth).to_dict()}
        if task == "fbs":
            entry["packet"] = packet_metrics(bundle.layers[layer], traces)
        report["layers"][layer.value] = entry

    by_level: Dict[int, List[bool]] = defaultdict(list)
    for trace, verdict in zip(traces, verdicts):
        by_level[int(trace.attacker_level)].append(verdict.label == str(trace.scenario))
    report["per_level_accuracy"] = {str(level): float(np.mean(hits)) for level, hits in sorted(by_level.items())}
    logger.info(f"📊 {task} eval on {len(traces)} traces: accuracy={report['trace']['accuracy']:.4f} "
                f"fpr={report['trace']['fpr']:.4f}")
    return report, verdicts


def seqlen_sweep(train: Sequence[Trace], test: Sequence[Trace], layer: Layer,
                 lengths: Sequence[int], config: PacketModelConfig) -> List[Dict[str, Any]]:
    """Packet accuracy / macro F1 on `test` for a packet model trained at each len_seq."""
    rows = []
    for len_seq in lengths:
        cfg = PacketModelConfig(hidden=config.hidden, len_seq=len_seq, stride=None,
                                epochs=config.epochs, lr=config.lr, seed=config.seed)
        codebook, model, history = train_fbs_packet(train, layer, cfg)
        metrics = packet_metrics(LayerArtifacts(layer, codebook=codebook, fbs_packet=model), test)
        rows.append({"len_seq": len_seq, "accuracy": metrics.get("accuracy"),
                     "f1": metrics.get("f1"), "final_loss": history[-1]})
        logger.info(f"📊 len_seq={len_seq}: accuracy={metrics.get('accuracy')}")
    return rows


def holdout_eval(traces: Sequence[Trace], layer: Layer, config: SageConfig,
                 tau: float = 0.5, attacks: Optional[Sequence[int]] = None) -> Dict[str, Any]:
    """
    Hold-one-attack-out: for each attack, train on every other class and
    report the share of its traces that still get a non-Benign verdict.

    Only classes that occur as edge targets on `layer` are required when
    retraining; attacks with no edges on this layer are skipped.
    """
    graphs = [(t, graph_of(t, layer)) for t in traces]
    present = {label_code(stats.target, DatasetKind.MSA)
               for _, g in graphs if g is not None for stats in g.edges.values()}
    candidates = list(attacks) if attacks is not None else [a.id for a in ATTACKS]
    attack_ids = [a for a in candidates if a in present]
    skipped = sorted(set(candidates) - set(attack_ids))
    if skipped:
        logger.info(f"⚠️ Attacks {skipped} have no {layer.value} edges; not held out")
    per_attack: Dict[str, Any] = {}
    hits_total = n_total = 0
    for attack_id in attack_ids:
        held = Label.msa(attack_id)
        train = [g for t, g in graphs if g is not None and t.scenario != held]
        test = [(t, g) for t, g in graphs if g is not None and t.scenario == held]
        if not test:
            continue
        required = sorted(present - {attack_id})
        model, bank, _ = train_msa(train, config, require_classes=required)
        hits = 0
        for trace, graph in test:
            verdict = nearest_attack(model, graph, bank, tau, trace.trace_id)
            hits += int(verdict.prediction.label.kind == LabelKind.MSA)
        per_attack[str(attack_id)] = {"n": len(test), "non_benign": hits / len(test)}
        hits_total += hits
        n_total += len(test)
        logger.info(f"📊 Held out attack {attack_id}: non-Benign on {hits}/{len(test)}")
    return {"layer": layer.value, "tau": tau, "attacks": per_attack,
            "non_benign_rate": hits_total / n_total if n_total else None}


def compare_signatures(traces: Sequence[Trace], artifacts: Optional[LayerArtifacts] = None,
                       tau: float = 0.5) -> Dict[str, Any]:
    """Signature evasion report, with the graph classifier as companion when trained."""
    classifier: Optional[Callable[[Trace], Label]] = None
    if artifacts is not None and artifacts.supports("msa"):
        def classifier(trace: Trace) -> Label:
            return msa_layer_verdict(artifacts, trace, tau).prediction.label
    return evasion_report(traces, get_signatures(), classifier)


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def _dense_case(rng: np.random.Generator) -> Tuple[Callable[[ParamSet], float], ParamSet]:
    params = ParamSet({"W": rng.normal(size=(3, 4)), "b": rng.normal(size=3), "x": rng.normal(size=(5, 4))})
    target = rng.normal(size=(5, 3))

    def fn(p: ParamSet) -> float:
        y = dense(p["x"], p["W"], p["b"])
        loss, dy = mse_loss(y, target)
        dx, dW, db = dense_backward(p["x"], p["W"], dy)
        p.accumulate("W", dW)
        p.accumulate("b", db)
        p.accumulate("x", dx)
        return loss
    return fn, params


def _lstm_case(rng: np.random.Generator, activation: str) -> Tuple[Callable[[ParamSet], float], ParamSet]:
    d, h = 3, 4
    params = ParamSet({
        "x": rng.normal(size=d), "h": rng.normal(size=h), "c": rng.normal(size=h),
        "W": rng.normal(scale=0.5, size=(4 * h, d + h)), "b": rng.normal(scale=0.5, size=4 * h),
    })
    rh, rc = rng.normal(size=h), rng.normal(size=h)

    def fn(p: ParamSet) -> float:
        h_t, c_t, cache = lstm_cell(p["x"], p["h"], p["c"], p["W"], p["b"], activation=activation)
        dx, dh, dc, dW, db = lstm_cell_backward(cache, rh, rc)
        for name, g in (("x", dx), ("h", dh), ("c", dc), ("W", dW), ("b", db)):
            p.accumulate(name, g)
        return float(rh @ h_t + rc @ c_t)
    return fn, params


def _attention_case(rng: np.random.Generator) -> Tuple[Callable[[ParamSet], float], ParamSet]:
    params = ParamSet({"H": rng.normal(size=(5, 4)), "q": rng.normal(size=4)})
    rctx, ralpha = rng.normal(size=4), rng.normal(size=5)

    def fn(p: ParamSet) -> float:
        context, alpha, cache = attention(p["H"], p["q"])
        dH, dq = attention_backward(cache, rctx, ralpha)
        p.accumulate("H", dH)
        p.accumulate("q", dq)
        return float(rctx @ context + ralpha @ alpha)
    return fn, params


def _attended_output_case(rng: np.random.Generator) -> Tuple[Callable[[ParamSet], float], ParamSet]:
    params = ParamSet({"ctx": rng.normal(size=4), "h": rng.normal(size=4),
                       "Wc": rng.normal(scale=0.5, size=(4, 8)), "bc": rng.normal(size=4)})
    r = rng.normal(size=4)

    def fn(p: ParamSet) -> float:
        out, cache = attended_output(p["ctx"], p["h"], p["Wc"], p["bc"])
        dctx, dh, dWc, dbc = attended_output_backward(cache, r)
        for name, g in (("ctx", dctx), ("h", dh), ("Wc", dWc), ("bc", dbc)):
            p.accumulate(name, g)
        return float(r @ out)
    return fn, params


def _toy_packets(rng: np.random.Generator, layer: Layer, n: int) -> List[Packet]:
    kinds = ["rrcConnectionRequest", "rrcConnectionSetup", "dlInformationTransfer", "ulInformationTransfer"]
    labels = [BENIGN, Label.msa(4), Label.msa(6)]
    return [
        Packet("toy", i, layer, message_kind(layer, kinds[int(rng.integers(len(kinds)))]), {},
               labels[int(rng.integers(len(labels)))])
        for i in range(n)
    ]


def _sage_case(rng: np.random.Generator, seed: int) -> Tuple[Callable[[ParamSet], float], ParamSet]:
    graph = build_graph(_toy_packets(rng, Layer.RRC, 12))
    model = SageModel(Layer.RRC, SageConfig(hidden=4, seed=seed))
    tensors = graph_tensors(graph)
    return (lambda p: model.graph_loss(tensors)), model.params


def _packet_model_case(rng: np.random.Generator, seed: int) -> Tuple[Callable[[ParamSet], float], ParamSet]:
    layer = Layer.NAS
    kind_field = "nas_eps_nas_msg_emm_type_value"
    layout = InputLayout(layer, [kind_field], {kind_field: [2, 3]})
    model = PacketModel(layout, PacketModelConfig(hidden=3, len_seq=4, seed=seed))
    codes = np.zeros((4, len(SCHEMAS[layer])), dtype=np.int64)
    codes[:, SCHEMAS[layer].index(kind_field)] = rng.integers(2, 5, size=4)
    X = layout.encode(codes)
    targets = rng.integers(0, 2, size=4)
    mask = np.array([1.0, 1.0, 1.0, 0.0])
    state = (rng.normal(scale=0.5, size=3), rng.normal(scale=0.5, size=3))

    def fn(p: ParamSet) -> float:
        loss, _ = model.window_loss(X, targets, mask, state)
        return loss
    return fn, model.params


def gradcheck_suite(n_seeds: int = 20, seed: int = 0) -> Dict[str, float]:
    """
    Max relative gradient error per differentiable component over n_seeds seeds.

    Returns:
        {component: worst error}
    """
    cases: Dict[str, Callable[[np.random.Generator, int], Tuple[Callable, ParamSet]]] = {
        "dense_mse": lambda rng, s: _dense_case(rng),
        "lstm_cell_tanh": lambda rng, s: _lstm_case(rng, "tanh"),
        "lstm_cell_sigmoid": lambda rng, s: _lstm_case(rng, "sigmoid"),
        "attention": lambda rng, s: _attention_case(rng),
        "attended_output": lambda rng, s: _attended_output_case(rng),
        "sage_edge_head": _sage_case,
        "packet_model": _packet_model_case,
    }
    worst: Dict[str, float] = {}
    for name, make in cases.items():
        errors = []
        for k in range(n_seeds):
            rng = np.random.default_rng(seed + k)
            fn, params = make(rng, seed + k)
            errors.append(grad_check(fn, params))
        worst[name] = float(max(errors))
        logger.info(f"🧪 {name}: max relative error {worst[name]:.2e} over {n_seeds} seeds")
    return worst
