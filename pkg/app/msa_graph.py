#!/usr/bin/env python3
"""
Flow-graph multi-step attack classification.

- build_graph: one node per message kind, one directed edge per consecutive
  packet pair, labeled with the successor packet's label
- SageModel: one mean-aggregator message-passing layer plus a log-softmax
  edge head over 22 classes (Benign + 21 attacks)
- AttackPathBank: the edges each attack was seen on during training, used by
  overlap_score / nearest_attack to match reshaped or unseen variants
"""

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from app.config import DEFAULT_SEED, FORMAT_VERSION
from app.core_model import (
    AttackKind,
    BENIGN,
    DatasetKind,
    Label,
    LabelKind,
    Layer,
    N_MSA_CLASSES,
    Packet,
    Trace,
    VOCABULARY,
    attack_by_id,
    decode_label,
    label_code,
    split_layer,
)
from app.errors import EmptyInput, EmptyTrainingSet, MissingClass, MixedLayerInput, UnknownAttack, UntrainedModel
from app.fbs_detect import Prediction
from app.numkernel import (
    ParamSet,
    concat,
    concat_backward,
    dense,
    dense_backward,
    log_softmax,
    log_softmax_backward,
    nll_loss,
    relu,
    relu_backward,
    sgd_step,
)
from app.utils import check_format_version, read_json, write_json

logger = logging.getLogger(__name__)

Edge = Tuple[str, str]
N_EDGE_FEATURES = 2
N_DEGREE_FEATURES = 3


def _label_rank(label: Label) -> Tuple[int, int]:
    if label.kind == LabelKind.MSA:
        return 2, label.attack.id
    return (1, 0) if label.kind == LabelKind.FBS else (0, 0)


@dataclass
class EdgeStats:
    count: int = 0
    labels: Counter = field(default_factory=Counter)
    first_index: int = 0
    predicted: Optional[Label] = None

    @property
    def target(self) -> Label:
        """Majority label; ties go to the higher class code."""
        return max(self.labels.items(), key=lambda item: (item[1], _label_rank(item[0])))[0]


@dataclass
class FlowGraph:
    layer: Layer
    nodes: List[str]
    edges: Dict[Edge, EdgeStats]
    n_packets: int

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_set(self) -> FrozenSet[Edge]:
        return frozenset(self.edges)

    def to_dict(self) -> Dict[str, Any]:
        edges = []
        for (src, dst), stats in self.edges.items():
            label = stats.predicted if stats.predicted is not None else stats.target
            edges.append({"src": src, "dst": dst, "count": stats.count, "label": str(label)})
        return {"layer": self.layer.value, "nodes": list(self.nodes), "edges": edges}


def build_graph(packets: Sequence[Packet]) -> FlowGraph:
    """
    Build the flow graph of an ordered single-layer packet sequence.

    Raises:
        EmptyInput: no packets
        MixedLayerInput: packets from both layers
    """
    if not packets:
        raise EmptyInput("Cannot build a flow graph from zero packets")
    layers = {p.layer for p in packets}
    if len(layers) > 1:
        raise MixedLayerInput("Flow graphs are built from one layer at a time")

    edges: Dict[Edge, EdgeStats] = {}
    for i in range(1, len(packets)):
        key = (packets[i - 1].kind.name, packets[i].kind.name)
        stats = edges.get(key)
        if stats is None:
            stats = edges[key] = EdgeStats(first_index=i - 1)
        stats.count += 1
        stats.labels[packets[i].label] += 1

    return FlowGraph(
        layer=packets[0].layer,
        nodes=sorted({p.kind.name for p in packets}),
        edges={key: edges[key] for key in sorted(edges)},
        n_packets=len(packets),
    )


def graph_of(trace: Trace, layer: Layer) -> Optional[FlowGraph]:
    """Flow graph of one layer of a trace, or None when the layer is empty."""
    packets = split_layer(trace, layer).packets
    return build_graph(packets) if packets else None


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------

@dataclass
class GraphTensors:
    keys: List[Edge]
    X: np.ndarray
    A: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_feats: np.ndarray
    targets: np.ndarray


def node_features(graph: FlowGraph) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-hot kind over the layer vocabulary plus in/out/total degree / |nodes|.

    Returns:
        (X, A) with A the row-normalised undirected adjacency without self loops
    """
    vocab = VOCABULARY[graph.layer]
    index = {name: i for i, name in enumerate(graph.nodes)}
    n = len(graph.nodes)
    X = np.zeros((n, len(vocab) + N_DEGREE_FEATURES))
    in_deg = np.zeros(n)
    out_deg = np.zeros(n)
    adjacency = np.zeros((n, n))
    for src, dst in graph.edges:
        u, v = index[src], index[dst]
        out_deg[u] += 1
        in_deg[v] += 1
        if u != v:
            adjacency[u, v] = adjacency[v, u] = 1.0
    for name, i in index.items():
        X[i, vocab.index(name)] = 1.0
    X[:, len(vocab)] = in_deg / n
    X[:, len(vocab) + 1] = out_deg / n
    X[:, len(vocab) + 2] = (in_deg + out_deg) / n
    rows = adjacency.sum(axis=1, keepdims=True)
    A = np.divide(adjacency, rows, out=np.zeros_like(adjacency), where=rows > 0)
    return X, A


def graph_tensors(graph: FlowGraph, with_targets: bool = True) -> GraphTensors:
    X, A = node_features(graph)
    index = {name: i for i, name in enumerate(graph.nodes)}
    keys = list(graph.edges)
    span = max(graph.n_packets - 2, 1)
    feats = np.array([[np.log1p(s.count), s.first_index / span] for s in graph.edges.values()]).reshape(-1, N_EDGE_FEATURES)
    targets = np.array(
        [label_code(s.target, DatasetKind.MSA) for s in graph.edges.values()] if with_targets else [],
        dtype=np.int64,
    )
    return GraphTensors(
        keys=keys,
        X=X,
        A=A,
        src=np.array([index[u] for u, _ in keys], dtype=np.int64),
        dst=np.array([index[v] for _, v in keys], dtype=np.int64),
        edge_feats=feats,
        targets=targets,
    )


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class SageConfig:
    hidden: int = 32
    epochs: int = 60
    lr: float = 0.1
    seed: int = DEFAULT_SEED
    n_classes: int = N_MSA_CLASSES


class SageModel:
    MODEL_TYPE = "msa_sage_v1"

    def __init__(self, layer: Layer, config: SageConfig, params: Optional[ParamSet] = None):
        self.layer = layer
        self.config = config
        f = len(VOCABULARY[layer]) + N_DEGREE_FEATURES
        h = config.hidden
        e = 2 * h + N_EDGE_FEATURES
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = ParamSet.uniform(rng, {
                "Ws": ((h, 2 * f), 2 * f),
                "bs": ((h,), 2 * f),
                "We": ((config.n_classes, e), e),
                "be": ((config.n_classes,), e),
            })
        self.params = params

    def forward(self, t: GraphTensors) -> Tuple[np.ndarray, Dict[str, Any]]:
        """Returns (E, n_classes) log-probabilities and the backward cache."""
        p = self.params
        M = t.A @ t.X
        XM, xm_sizes = concat([t.X, M])
        pre = dense(XM, p["Ws"], p["bs"])
        H = relu(pre)
        E, e_sizes = concat([H[t.src], H[t.dst], t.edge_feats])
        log_probs = log_softmax(dense(E, p["We"], p["be"]))
        return log_probs, {"XM": XM, "pre": pre, "E": E, "e_sizes": e_sizes, "log_probs": log_probs, "n": H.shape[0]}

    def backward(self, t: GraphTensors, cache: Dict[str, Any], dlog_probs: np.ndarray) -> None:
        p = self.params
        dlogits = log_softmax_backward(cache["log_probs"], dlog_probs)
        dE, dWe, dbe = dense_backward(cache["E"], p["We"], dlogits)
        p.accumulate("We", dWe)
        p.accumulate("be", dbe)
        dHu, dHv, _ = concat_backward(dE, cache["e_sizes"])
        dH = np.zeros((cache["n"], self.config.hidden))
        np.add.at(dH, t.src, dHu)
        np.add.at(dH, t.dst, dHv)
        dpre = relu_backward(cache["pre"], dH)
        _, dWs, dbs = dense_backward(cache["XM"], p["Ws"], dpre)
        p.accumulate("Ws", dWs)
        p.accumulate("bs", dbs)

    def graph_loss(self, t: GraphTensors) -> float:
        """Forward + mean edge NLL + backward; gradients accumulate into params."""
        log_probs, cache = self.forward(t)
        loss, dlog_probs = nll_loss(log_probs, t.targets)
        self.backward(t, cache, dlog_probs)
        return loss

    def edge_log_probs(self, graph: FlowGraph) -> Tuple[List[Edge], np.ndarray]:
        if graph.n_edges == 0:
            return [], np.zeros((0, self.config.n_classes))
        t = graph_tensors(graph, with_targets=False)
        log_probs, _ = self.forward(t)
        return t.keys, log_probs

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "model_type": self.MODEL_TYPE,
            "layer": self.layer.value,
            "config": asdict(self.config),
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SageModel":
        return cls(Layer(payload["layer"]), SageConfig(**payload["config"]), ParamSet.from_dict(payload["params"]))

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())
        logger.info(f"💾 Saved {self.layer.value} graph model to {path}")

    @classmethod
    def load(cls, path: str) -> "SageModel":
        return cls.from_dict(read_json(path, expected_type=cls.MODEL_TYPE))


class AttackPathBank:
    """Per-attack set of directed edges seen carrying that attack's label."""

    MODEL_TYPE = "msa_bank_v1"

    def __init__(self, layer: Layer, paths: Optional[Dict[int, Set[Edge]]] = None):
        self.layer = layer
        self.paths: Dict[int, Set[Edge]] = {a: set(edges) for a, edges in (paths or {}).items()}

    def add_graph(self, graph: FlowGraph) -> None:
        for key, stats in graph.edges.items():
            for label in stats.labels:
                if label.kind == LabelKind.MSA:
                    self.paths.setdefault(label.attack.id, set()).add(key)

    def attacks(self) -> List[int]:
        return sorted(a for a, edges in self.paths.items() if edges)

    def __contains__(self, attack_id: int) -> bool:
        return bool(self.paths.get(attack_id))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "model_type": self.MODEL_TYPE,
            "layer": self.layer.value,
            "paths": {str(a): sorted([list(e) for e in self.paths[a]]) for a in self.attacks()},
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "AttackPathBank":
        check_format_version(payload, "attack path bank")
        paths = {int(a): {(src, dst) for src, dst in edges} for a, edges in payload["paths"].items()}
        return cls(Layer(payload["layer"]), paths)

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> "AttackPathBank":
        return cls.from_dict(read_json(path, expected_type=cls.MODEL_TYPE))


def train_msa(graphs: Sequence[FlowGraph], config: SageConfig,
              require_classes: Optional[Iterable[int]] = None
              ) -> Tuple[SageModel, AttackPathBank, List[float]]:
    """
    Train the edge classifier and collect the attack path bank.

    Args:
        graphs: labeled training graphs of one layer
        config: hyperparameters
        require_classes: class codes that must occur among edge targets
            (default: all 22)

    Returns:
        (model, bank, mean loss per epoch)

    Raises:
        EmptyTrainingSet: no graph has an edge
        MissingClass: a required class never occurs as an edge target
    """
    graphs = [g for g in graphs if g.n_edges > 0]
    if not graphs:
        raise EmptyTrainingSet("No graph with at least one edge to train on")
    layer = graphs[0].layer
    if any(g.layer != layer for g in graphs):
        raise MixedLayerInput("Training graphs mix NAS and RRC")

    tensors = [graph_tensors(g) for g in graphs]
    present = set(int(c) for t in tensors for c in t.targets)
    required = set(range(config.n_classes)) if require_classes is None else set(require_classes)
    missing = sorted(required - present)
    if missing:
        names = ", ".join(str(decode_label(c, DatasetKind.MSA)) for c in missing[:5])
        raise MissingClass(f"{len(missing)} class(es) never label an edge: {names}")

    bank = AttackPathBank(layer)
    for g in graphs:
        bank.add_graph(g)

    model = SageModel(layer, config)
    rng = np.random.default_rng(config.seed)
    logger.info(f"🧠 Training {layer.value} graph model on {len(graphs)} graphs, "
                f"{sum(len(t.keys) for t in tensors)} edges, {config.epochs} epochs")
    history: List[float] = []
    for epoch in range(config.epochs):
        losses = []
        for k in rng.permutation(len(tensors)):
            losses.append(model.graph_loss(tensors[k]))
            sgd_step(model.params, config.lr)
        history.append(float(np.mean(losses)))
        logger.debug(f"epoch {epoch + 1}/{config.epochs}: nll={history[-1]:.5f}")
    logger.info(f"✅ Graph model trained: nll {history[0]:.4f} -> {history[-1]:.4f}")
    return model, bank, history


def predict_edges(model: SageModel, graph: FlowGraph) -> Dict[Edge, Tuple[Label, float]]:
    """Argmax label and its probability for every edge; also stored on the graph."""
    keys, log_probs = model.edge_log_probs(graph)
    result = {}
    for key, row in zip(keys, log_probs):
        code = int(np.argmax(row))
        label = decode_label(code, DatasetKind.MSA)
        graph.edges[key].predicted = label
        result[key] = (label, float(np.exp(row[code])))
    return result


def predict_attack(model: SageModel, graph: FlowGraph, trace_id: Optional[str] = None) -> Prediction:
    """
    Trace verdict from edge predictions.

    Benign unless some edge's argmax is an attack; otherwise the attack with
    the largest sum of winning-edge probabilities, confidence being the mean
    probability over its supporting edges. A graph without edges is Benign.
    """
    if model is None:
        raise UntrainedModel("No graph model loaded")
    if graph.n_edges == 0:
        return Prediction(BENIGN, 1.0, graph.layer, trace_id)
    keys, log_probs = model.edge_log_probs(graph)
    probs = np.exp(log_probs)
    winners = np.argmax(log_probs, axis=1)

    votes: Dict[int, List[float]] = {}
    for row, code in zip(probs, winners):
        if code != 0:
            votes.setdefault(int(code), []).append(float(row[code]))
    if not votes:
        return Prediction(BENIGN, float(probs[:, 0].mean()), graph.layer, trace_id)
    best = max(votes, key=lambda c: (sum(votes[c]), -c))
    return Prediction(Label.msa(best), float(np.mean(votes[best])), graph.layer, trace_id)


def overlap_score(graph: FlowGraph, attack: AttackKind, bank: AttackPathBank) -> float:
    """
    |edges(graph) ∩ bank[attack]| / |bank[attack]| over directed kind pairs.

    Raises:
        UnknownAttack: the bank holds no path for the attack
    """
    path = bank.paths.get(attack.id)
    if not path:
        raise UnknownAttack(f"No {bank.layer.value} attack path recorded for attack {attack.id}")
    return len(graph.edge_set() & path) / len(path)


@dataclass(frozen=True)
class NearestVerdict:
    prediction: Prediction
    overlap: float
    variant: bool


def nearest_attack(model: SageModel, graph: FlowGraph, bank: AttackPathBank,
                   tau: float = 0.5, trace_id: Optional[str] = None) -> NearestVerdict:
    """
    predict_attack with an overlap fallback for low-confidence verdicts.

    When the classifier's confidence is below 0.5 and some attack path overlaps
    the graph by at least tau, that attack is reported with variant=True.
    A non-Benign classifier verdict is never turned into Benign.
    """
    prediction = predict_attack(model, graph, trace_id)
    overlaps = {a: overlap_score(graph, attack_by_id(a), bank) for a in bank.attacks()}
    if overlaps:
        best_attack = max(overlaps, key=lambda a: (overlaps[a], -a))
        best_overlap = overlaps[best_attack]
    else:
        best_attack, best_overlap = None, 0.0

    if prediction.confidence < 0.5 and best_attack is not None and best_overlap >= tau:
        return NearestVerdict(Prediction(Label.msa(best_attack), best_overlap, graph.layer, trace_id),
                              best_overlap, True)
    if prediction.label.kind == LabelKind.MSA:
        return NearestVerdict(prediction, overlaps.get(prediction.label.attack.id, 0.0), False)
    return NearestVerdict(prediction, best_overlap, False)
