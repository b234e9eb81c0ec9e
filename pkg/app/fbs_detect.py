#!/usr/bin/env python3
"""
Two-level fake-base-station detection.

Packet level: a two-branch recurrent classifier over windows of encoded packets.
  - branch A: stateful LSTM (sigmoid activations) whose state is carried across
    consecutive windows of one trace and reset between traces
  - branch B: LSTM + causal attention, stateless per window
  - head: sigmoid(Wd [hA; h'] + bd) at every timestep, trained with masked MSE

Trace level: logistic regression over an 8-component summary of the packet
probabilities.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import (
    DEFAULT_EPOCHS,
    DEFAULT_HIDDEN,
    DEFAULT_LR,
    DEFAULT_SEED,
    FORMAT_VERSION,
    NAS_LEN_SEQ,
    default_len_seq,
)
from app.core_model import BENIGN, FBS, Label, Layer, Trace
from app.errors import EmptyTrainingSet, ShapeMismatch, UntrainedModel, ValidationError
from app.featurize import InputLayout, Window, WindowSet, slice_windows
from app.numkernel import (
    ParamSet,
    attended_output,
    attended_output_backward,
    attention,
    attention_backward,
    bce_loss,
    concat,
    concat_backward,
    dense,
    dense_backward,
    lstm_cell,
    lstm_cell_backward,
    mse_loss,
    sgd_step,
    sigmoid,
    sigmoid_backward,
)
from app.utils import read_json, write_json

logger = logging.getLogger(__name__)

State = Tuple[np.ndarray, np.ndarray]


@dataclass
class PacketModelConfig:
    hidden: int = DEFAULT_HIDDEN
    len_seq: int = NAS_LEN_SEQ
    stride: Optional[int] = None
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    seed: int = DEFAULT_SEED

    @property
    def train_stride(self) -> int:
        return self.stride or self.len_seq


@dataclass
class TraceModelConfig:
    epochs: int = 300
    lr: float = 0.5
    seed: int = DEFAULT_SEED


@dataclass(frozen=True)
class Prediction:
    label: Label
    confidence: float
    layer: Layer
    trace_id: Optional[str] = None


# ---------------------------------------------------------------------------
# Packet model
# ---------------------------------------------------------------------------

class PacketModel:
    """Per-packet FBS probability model over one layer."""

    MODEL_TYPE = "fbs_packet_v1"

    def __init__(self, layout: InputLayout, config: PacketModelConfig, params: Optional[ParamSet] = None):
        self.layout = layout
        self.config = config
        self.hidden = config.hidden
        d, h = layout.width, config.hidden
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = ParamSet.uniform(rng, {
                "a_W": ((4 * h, d + h), d + h),
                "a_b": ((4 * h,), d + h),
                "b_W": ((4 * h, d + h), d + h),
                "b_b": ((4 * h,), d + h),
                "Wc": ((h, 2 * h), 2 * h),
                "bc": ((h,), 2 * h),
                "Wd": ((1, 2 * h), 2 * h),
                "bd": ((1,), 2 * h),
            })
        self.params = params

    @property
    def layer(self) -> Layer:
        return self.layout.layer

    def zero_state(self) -> State:
        return np.zeros(self.hidden), np.zeros(self.hidden)

    def forward(self, X: np.ndarray, state: State, carry_at: Optional[int] = None
                ) -> Tuple[np.ndarray, List[Dict[str, Any]], State]:
        """
        Run one window.

        Args:
            X: (T, d) encoded inputs
            state: branch-A (h, c) entering the window
            carry_at: step whose branch-A state is handed to the next window
                (defaults to the last step)

        Returns:
            (per-step probabilities (T,), caches, carried branch-A state)
        """
        p = self.params
        if X.ndim != 2 or X.shape[1] != self.layout.width:
            raise ShapeMismatch(f"window inputs {X.shape} do not match layout width {self.layout.width}")
        T = X.shape[0]
        carry_at = T - 1 if carry_at is None else min(max(carry_at, 0), T - 1)

        hA, cA = state
        hB, cB = self.zero_state()
        H_B: List[np.ndarray] = []
        caches: List[Dict[str, Any]] = []
        probs = np.zeros(T)
        carried = state
        for t in range(T):
            hA, cA, cache_a = lstm_cell(X[t], hA, cA, p["a_W"], p["a_b"], activation="sigmoid")
            hB, cB, cache_b = lstm_cell(X[t], hB, cB, p["b_W"], p["b_b"], activation="tanh")
            H_B.append(hB)
            context, _, cache_att = attention(np.stack(H_B), hB)
            h_att, cache_out = attended_output(context, hB, p["Wc"], p["bc"])
            joint, sizes = concat([hA, h_att])
            z = dense(joint, p["Wd"], p["bd"])
            y = sigmoid(z)
            probs[t] = y[0]
            caches.append({"a": cache_a, "b": cache_b, "att": cache_att, "out": cache_out,
                           "joint": joint, "sizes": sizes, "y": y})
            if t == carry_at:
                carried = (hA, cA)
        return probs, caches, carried

    def backward(self, caches: List[Dict[str, Any]], dprobs: np.ndarray) -> None:
        """Truncated BPTT through one window; accumulates into self.params."""
        p = self.params
        h = self.hidden
        T = len(caches)
        dhA_out = np.zeros((T, h))
        dhB_out = np.zeros((T, h))
        p_acc = self.params.accumulate

        for t in range(T):
            cache = caches[t]
            dz = sigmoid_backward(cache["y"], np.array([dprobs[t]]))
            djoint, dWd, dbd = dense_backward(cache["joint"], p["Wd"], dz)
            p_acc("Wd", dWd)
            p_acc("bd", dbd)
            dhA, dh_att = concat_backward(djoint, cache["sizes"])
            dhA_out[t] += dhA
            dcontext, dhB_direct, dWc, dbc = attended_output_backward(cache["out"], dh_att)
            p_acc("Wc", dWc)
            p_acc("bc", dbc)
            dH, dquery = attention_backward(cache["att"], dcontext)
            dhB_out[: t + 1] += dH
            dhB_out[t] += dhB_direct + dquery

        for branch, dh_out, names in (("a", dhA_out, ("a_W", "a_b")), ("b", dhB_out, ("b_W", "b_b"))):
            dh_next = np.zeros(h)
            dc_next = np.zeros(h)
            dW = np.zeros_like(p[names[0]])
            db = np.zeros_like(p[names[1]])
            for t in reversed(range(T)):
                _, dh_next, dc_next, dW_t, db_t = lstm_cell_backward(caches[t][branch], dh_out[t] + dh_next, dc_next)
                dW += dW_t
                db += db_t
            self.params.accumulate(names[0], dW)
            self.params.accumulate(names[1], db)

    def window_loss(self, X: np.ndarray, targets: np.ndarray, mask: np.ndarray,
                    state: State, carry_at: Optional[int] = None) -> Tuple[float, State]:
        """Forward + masked MSE + backward for one window; returns (loss, carried state)."""
        probs, caches, carried = self.forward(X, state, carry_at)
        loss, dprobs = mse_loss(probs, targets.astype(np.float64), mask)
        self.backward(caches, dprobs)
        return loss, carried

    def predict_codes(self, codes: np.ndarray, stride: int = 1) -> np.ndarray:
        """Per-packet probabilities of one trace given its (n, n_schema) code rows."""
        n = codes.shape[0]
        if n == 0:
            return np.zeros(0)
        labels = np.zeros(n, dtype=np.int64)
        windows = slice_windows("", codes, labels, self.config.len_seq, min(stride, self.config.len_seq))
        return predict_packets(self, windows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "model_type": self.MODEL_TYPE,
            "config": asdict(self.config),
            "layout": self.layout.to_dict(),
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "PacketModel":
        return cls(InputLayout.from_dict(payload["layout"]),
                   PacketModelConfig(**payload["config"]),
                   ParamSet.from_dict(payload["params"]))

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())
        logger.info(f"💾 Saved {self.layer.value} packet model to {path}")

    @classmethod
    def load(cls, path: str) -> "PacketModel":
        return cls.from_dict(read_json(path, expected_type=cls.MODEL_TYPE))


class ConstantPacketModel:
    """Ablation stand-in: every packet gets the same probability."""

    def __init__(self, layer: Layer, value: float = 0.5, config: Optional[PacketModelConfig] = None):
        self.layer = layer
        self.value = value
        self.config = config or PacketModelConfig(len_seq=default_len_seq(layer.value), epochs=0)

    def predict_codes(self, codes: np.ndarray, stride: int = 1) -> np.ndarray:
        return np.full(codes.shape[0], self.value)


def _encoded(model: PacketModel, w: Window) -> np.ndarray:
    return model.layout.encode(w.codes)


def train_packet_model(windows: WindowSet, layout: InputLayout,
                       config: PacketModelConfig) -> Tuple[PacketModel, List[float]]:
    """
    Train the packet model on windows cut with config.len_seq / config.train_stride.

    Branch-A state is reset at the start of every trace and carried across its
    windows (fed in order). Trace order is reshuffled every epoch from config.seed.

    Returns:
        (model, mean loss per epoch)

    Raises:
        EmptyTrainingSet: no windows
        ValidationError: labels outside {0, 1} or windows cut with another len_seq
    """
    if len(windows) == 0:
        raise EmptyTrainingSet("No windows to train the packet model on")
    if windows.len_seq != config.len_seq:
        raise ValidationError(f"windows use len_seq {windows.len_seq}, config says {config.len_seq}")
    for w in windows:
        real = w.labels[w.mask > 0]
        if np.any((real != 0) & (real != 1)):
            raise ValidationError(f"{w.trace_id}: packet labels must be binary (Benign=0, Fbs=1)")

    model = PacketModel(layout, config)
    grouped = windows.by_trace()
    trace_ids = list(grouped)
    inputs = {tid: [_encoded(model, w) for w in ws] for tid, ws in grouped.items()}
    rng = np.random.default_rng(config.seed)
    carry_at = windows.stride - 1

    logger.info(f"🧠 Training {layout.layer.value} packet model: {len(trace_ids)} traces, "
                f"{len(windows)} windows, {config.epochs} epochs, lr={config.lr}")
    history: List[float] = []
    for epoch in range(config.epochs):
        losses = []
        for k in rng.permutation(len(trace_ids)):
            tid = trace_ids[k]
            state = model.zero_state()
            for w, X in zip(grouped[tid], inputs[tid]):
                loss, state = model.window_loss(X, w.labels, w.mask, state, carry_at)
                sgd_step(model.params, config.lr)
                losses.append(loss)
        history.append(float(np.mean(losses)))
        logger.debug(f"epoch {epoch + 1}/{config.epochs}: loss={history[-1]:.5f}")
    logger.info(f"✅ Packet model trained: loss {history[0]:.4f} -> {history[-1]:.4f}")
    return model, history


def predict_packets(model: PacketModel, windows: Sequence[Window]) -> np.ndarray:
    """
    Per-packet probabilities for the windows of one trace.

    Branch-A state is threaded from each window to the next at the step that
    precedes the next window's start; packets covered by several windows get
    the mean of their outputs.

    Raises:
        ShapeMismatch: windows from several traces, or not in stride order
    """
    if not windows:
        return np.zeros(0)
    if len({w.trace_id for w in windows}) != 1:
        raise ShapeMismatch("predict_packets expects the windows of a single trace")
    stride = windows[1].start - windows[0].start if len(windows) > 1 else model.config.len_seq
    for prev, nxt in zip(windows, windows[1:]):
        if nxt.start - prev.start != stride or stride < 1:
            raise ShapeMismatch("windows are not evenly strided")

    n = windows[-1].start + windows[-1].n_real
    total = np.zeros(n)
    count = np.zeros(n)
    state = model.zero_state()
    for w in windows:
        probs, _, state = model.forward(model.layout.encode(w.codes), state, carry_at=stride - 1)
        real = w.n_real
        total[w.start:w.start + real] += probs[:real]
        count[w.start:w.start + real] += 1
    return total / np.maximum(count, 1)


# ---------------------------------------------------------------------------
# Trace model
# ---------------------------------------------------------------------------

N_TRACE_FEATURES = 8
FLAG_THRESHOLD = 0.5


def _longest_run(flags: np.ndarray) -> int:
    best = run = 0
    for flag in flags:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best


def trace_features(probabilities: Sequence[float], trace: Trace, layer: Optional[Layer] = None) -> np.ndarray:
    """
    Summarise packet probabilities of a trace (or one layer of it).

    [fraction flagged, max, mean, longest flagged run / n,
     flagged TAU* / n, flagged Identity* / n, flagged *Reject / n, log(1 + flagged)]

    A packet is flagged when its probability exceeds 0.5. Every component
    is a function of the packet outputs, so a constant packet model gives a
    constant vector.

    Raises:
        ShapeMismatch: probabilities and packets are not aligned
    """
    kinds = [p.kind.name.lower() for p in trace.packets if layer is None or p.layer == layer]
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.shape != (len(kinds),):
        raise ShapeMismatch(f"{trace.trace_id}: {probs.shape[0]} probabilities for {len(kinds)} packets")
    n = len(kinds)
    if n == 0:
        return np.zeros(N_TRACE_FEATURES)

    flags = probs > FLAG_THRESHOLD
    tau = sum(1 for k, f in zip(kinds, flags) if f and "tau" in k)
    identity = sum(1 for k, f in zip(kinds, flags) if f and "identity" in k)
    reject = sum(1 for k, f in zip(kinds, flags) if f and "reject" in k)
    return np.array([
        flags.mean(),
        probs.max(),
        probs.mean(),
        _longest_run(flags) / n,
        tau / n,
        identity / n,
        reject / n,
        np.log1p(flags.sum()),
    ])


class TraceModel:
    """Logistic regression over standardised trace features."""

    MODEL_TYPE = "fbs_trace_v1"

    def __init__(self, layer: Layer, config: Optional[TraceModelConfig] = None):
        self.layer = layer
        self.config = config or TraceModelConfig()
        rng = np.random.default_rng(self.config.seed)
        self.params = ParamSet.uniform(rng, {
            "W": ((1, N_TRACE_FEATURES), N_TRACE_FEATURES),
            "b": ((1,), N_TRACE_FEATURES),
        })
        self.mean = np.zeros(N_TRACE_FEATURES)
        self.scale = np.ones(N_TRACE_FEATURES)
        self.trained = False

    def _standardise(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale

    def fit(self, features: np.ndarray, labels: Sequence[int]) -> List[float]:
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != N_TRACE_FEATURES or X.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"trace features {X.shape} / labels {y.shape}")
        if X.shape[0] == 0:
            raise EmptyTrainingSet("No traces to train the trace model on")

        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale = np.where(std > 1e-12, std, 1.0)
        Z = self._standardise(X)

        history = []
        for _ in range(self.config.epochs):
            logits = dense(Z, self.params["W"], self.params["b"])[:, 0]
            probs = sigmoid(logits)
            loss, dprobs = bce_loss(probs, y)
            dlogits = sigmoid_backward(probs, dprobs)[:, None]
            _, dW, db = dense_backward(Z, self.params["W"], dlogits)
            self.params.accumulate("W", dW)
            self.params.accumulate("b", db)
            sgd_step(self.params, self.config.lr)
            history.append(loss)
        self.trained = True
        logger.info(f"✅ {self.layer.value} trace model trained on {X.shape[0]} traces: "
                    f"log-loss {history[0]:.4f} -> {history[-1]:.4f}")
        return history

    def probability(self, features: np.ndarray) -> float:
        if not self.trained:
            raise UntrainedModel(f"{self.layer.value} trace model has not been trained")
        z = dense(self._standardise(np.asarray(features, dtype=np.float64)), self.params["W"], self.params["b"])
        return float(sigmoid(z)[0])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "model_type": self.MODEL_TYPE,
            "layer": self.layer.value,
            "config": asdict(self.config),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "trained": self.trained,
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "TraceModel":
        model = cls(Layer(payload["layer"]), TraceModelConfig(**payload["config"]))
        model.params = ParamSet.from_dict(payload["params"])
        model.mean = np.array(payload["mean"], dtype=np.float64)
        model.scale = np.array(payload["scale"], dtype=np.float64)
        model.trained = bool(payload["trained"])
        return model

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())
        logger.info(f"💾 Saved {self.layer.value} trace model to {path}")

    @classmethod
    def load(cls, path: str) -> "TraceModel":
        return cls.from_dict(read_json(path, expected_type=cls.MODEL_TYPE))


def train_trace_model(features: np.ndarray, labels: Sequence[int], layer: Layer,
                      config: Optional[TraceModelConfig] = None) -> Tuple[TraceModel, List[float]]:
    model = TraceModel(layer, config)
    history = model.fit(features, labels)
    return model, history


def predict_trace(model: TraceModel, features: np.ndarray, trace_id: Optional[str] = None) -> Prediction:
    """
    Binary trace verdict: Fbs when the logistic output is >= 0.5.

    Confidence is the probability of the emitted label.

    Raises:
        UntrainedModel: the model was never fitted
    """
    p = model.probability(features)
    if p >= 0.5:
        return Prediction(FBS, p, model.layer, trace_id)
    return Prediction(BENIGN, 1.0 - p, model.layer, trace_id)
