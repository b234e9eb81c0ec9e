#!/usr/bin/env python3
"""
Dense numerical kernel with explicit forward/backward passes.

Provides:
- ParamSet: named float64 parameters with gradient accumulators
- activations (sigmoid, tanh, relu, softmax, log_softmax) and concat
- dense, lstm_cell, attention, attended_output layers
- mse / nll / bce losses with masks
- sgd_step and a central-difference grad_check

Every forward returns what its backward needs; backward functions return
gradients instead of mutating anything, and callers accumulate them into a
ParamSet.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.config import FORMAT_VERSION
from app.errors import AllMasked, ShapeMismatch, ValidationError
from app.utils import check_format_version

logger = logging.getLogger(__name__)

Tensor = np.ndarray


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeMismatch(message)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    value: Tensor
    grad: Tensor


class ParamSet:
    """Named trainable tensors, each with a same-shaped gradient accumulator."""

    def __init__(self, tensors: Optional[Dict[str, Tensor]] = None):
        self._params: Dict[str, Parameter] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        v = np.array(value, dtype=np.float64)
        self._params[name] = Parameter(v, np.zeros_like(v))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def grad(self, name: str) -> Tensor:
        return self._params[name].grad

    def accumulate(self, name: str, gradient: Tensor) -> None:
        param = self._params[name]
        _require(gradient.shape == param.value.shape,
                 f"gradient for {name} has shape {gradient.shape}, expected {param.value.shape}")
        param.grad += gradient

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad.fill(0.0)

    def copy(self) -> "ParamSet":
        return ParamSet({name: p.value.copy() for name, p in self._params.items()})

    def to_dict(self) -> Dict:
        return {
            "format_version": FORMAT_VERSION,
            "tensors": {
                name: {"shape": list(p.value.shape), "values": [float(v) for v in p.value.reshape(-1)]}
                for name, p in self._params.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "ParamSet":
        check_format_version(payload, "ParamSet")
        params = cls()
        for name, entry in payload["tensors"].items():
            shape = tuple(entry["shape"])
            values = np.array(entry["values"], dtype=np.float64)
            _require(values.size == int(np.prod(shape)),
                     f"{name}: {values.size} values do not fill shape {shape}")
            params.add(name, values.reshape(shape))
        return params

    @classmethod
    def uniform(cls, rng: np.random.Generator,
                shapes: Dict[str, Tuple[Tuple[int, ...], int]]) -> "ParamSet":
        """
        Initialise every tensor from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).

        Args:
            rng: seeded generator; tensors are drawn in dict order
            shapes: name -> (shape, fan_in)
        """
        params = cls()
        for name, (shape, fan_in) in shapes.items():
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            params.add(name, rng.uniform(-bound, bound, size=shape))
        return params


# ---------------------------------------------------------------------------
# Elementwise activations
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y: Tensor, dy: Tensor) -> Tensor:
    return dy * y * (1.0 - y)


def tanh(x: Tensor) -> Tensor:
    return np.tanh(as_tensor(x))


def tanh_backward(y: Tensor, dy: Tensor) -> Tensor:
    return dy * (1.0 - y * y)


def relu(x: Tensor) -> Tensor:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x: Tensor, dy: Tensor) -> Tensor:
    return dy * (x > 0)


_ACTIVATIONS = {
    "tanh": (tanh, tanh_backward),
    "sigmoid": (sigmoid, sigmoid_backward),
}


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: Tensor, dy: Tensor, axis: int = -1) -> Tensor:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def log_softmax_backward(y: Tensor, dy: Tensor, axis: int = -1) -> Tensor:
    return dy - np.exp(y) * np.sum(dy, axis=axis, keepdims=True)


def concat(parts: Sequence[Tensor]) -> Tuple[Tensor, List[int]]:
    """Concatenate along the last axis; returns the split sizes for the backward pass."""
    arrays = [as_tensor(p) for p in parts]
    lead = {a.shape[:-1] for a in arrays}
    _require(len(lead) == 1, f"concat needs matching leading dims, got {[a.shape for a in arrays]}")
    return np.concatenate(arrays, axis=-1), [a.shape[-1] for a in arrays]


def concat_backward(dy: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    return np.split(dy, np.cumsum(sizes)[:-1], axis=-1)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = W x + b for a vector, or row-wise for a matrix of inputs."""
    x = as_tensor(x)
    _require(W.ndim == 2 and x.shape[-1] == W.shape[1],
             f"dense: input width {x.shape[-1]} does not match W {W.shape}")
    _require(b.shape == (W.shape[0],), f"dense: bias {b.shape} does not match W {W.shape}")
    return x @ W.T + b


def dense_backward(x: Tensor, W: Tensor, dy: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (dx, dW, db)."""
    if x.ndim == 1:
        return dy @ W, np.outer(dy, x), dy.copy()
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, W: Tensor, b: Tensor,
              activation: str = "tanh") -> Tuple[Tensor, Tensor, Dict]:
    """
    One gated recurrence step.

    W has shape (4h, d+h) with gate blocks ordered input, forget, output,
    candidate. Gates are sigmoid; `activation` is applied to the candidate
    and to the cell state on output.

    Returns:
        (h_t, c_t, cache)

    Raises:
        ShapeMismatch: dimensions disagree
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    hidden = h_prev.shape[0]
    _require(x.ndim == 1 and h_prev.ndim == 1, "lstm_cell expects vectors")
    _require(c_prev.shape == (hidden,), f"cell state {c_prev.shape} != hidden {hidden}")
    _require(W.shape == (4 * hidden, x.shape[0] + hidden),
             f"lstm W {W.shape} != {(4 * hidden, x.shape[0] + hidden)}")
    _require(b.shape == (4 * hidden,), f"lstm b {b.shape} != {(4 * hidden,)}")
    act, _ = _ACTIVATIONS[activation]

    xh = np.concatenate([x, h_prev])
    z = W @ xh + b
    i = sigmoid(z[:hidden])
    f = sigmoid(z[hidden:2 * hidden])
    o = sigmoid(z[2 * hidden:3 * hidden])
    g = act(z[3 * hidden:])
    c = f * c_prev + i * g
    a_c = act(c)
    h = o * a_c
    cache = {"xh": xh, "i": i, "f": f, "o": o, "g": g, "c_prev": c_prev, "a_c": a_c,
             "W": W, "d": x.shape[0], "activation": activation}
    return h, c, cache


def lstm_cell_backward(cache: Dict, dh: Tensor, dc: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Returns (dx, dh_prev, dc_prev, dW, db)."""
    _, act_backward = _ACTIVATIONS[cache["activation"]]
    i, f, o, g, a_c = cache["i"], cache["f"], cache["o"], cache["g"], cache["a_c"]

    do = dh * a_c
    dc_total = dc + act_backward(a_c, dh * o)
    di = dc_total * g
    dg = dc_total * i
    df = dc_total * cache["c_prev"]
    dc_prev = dc_total * f

    dz = np.concatenate([
        sigmoid_backward(i, di),
        sigmoid_backward(f, df),
        sigmoid_backward(o, do),
        act_backward(g, dg),
    ])
    dW = np.outer(dz, cache["xh"])
    dxh = cache["W"].T @ dz
    d = cache["d"]
    return dxh[:d], dxh[d:], dc_prev, dW, dz


def attention(H: Tensor, query: Tensor) -> Tuple[Tensor, Tensor, Dict]:
    """
    Scaled dot-product attention of one query over a sequence of states.

    e_i = q . h_i / sqrt(h), alpha = softmax(e), context = sum_i alpha_i h_i

    Returns:
        (context, alpha, cache)
    """
    H, query = as_tensor(H), as_tensor(query)
    _require(H.ndim == 2 and H.shape[0] >= 1, f"attention needs T >= 1 states, got {H.shape}")
    _require(query.shape == (H.shape[1],), f"query {query.shape} does not match states {H.shape}")
    scale = 1.0 / math.sqrt(H.shape[1])
    alpha = softmax(H @ query * scale)
    context = alpha @ H
    return context, alpha, {"H": H, "query": query, "alpha": alpha, "scale": scale}


def attention_backward(cache: Dict, dcontext: Tensor,
                       dalpha: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Returns (dH, dquery)."""
    H, query, alpha, scale = cache["H"], cache["query"], cache["alpha"], cache["scale"]
    dalpha_total = H @ dcontext
    if dalpha is not None:
        dalpha_total = dalpha_total + dalpha
    de = softmax_backward(alpha, dalpha_total)
    dH = np.outer(alpha, dcontext) + np.outer(de, query) * scale
    dquery = H.T @ de * scale
    return dH, dquery


def attended_output(context: Tensor, h: Tensor, Wc: Tensor, bc: Tensor) -> Tuple[Tensor, Dict]:
    """h' = tanh(Wc [context; h] + bc)."""
    v, sizes = concat([context, h])
    _require(Wc.ndim == 2 and Wc.shape[1] == v.shape[0],
             f"attended_output: concat width {v.shape[0]} != Wc columns {Wc.shape}")
    out = np.tanh(dense(v, Wc, bc))
    return out, {"v": v, "sizes": sizes, "Wc": Wc, "out": out}


def attended_output_backward(cache: Dict, dout: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Returns (dcontext, dh, dWc, dbc)."""
    dz = tanh_backward(cache["out"], dout)
    dv, dWc, dbc = dense_backward(cache["v"], cache["Wc"], dz)
    dcontext, dh = concat_backward(dv, cache["sizes"])
    return dcontext, dh, dWc, dbc


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _mask_for(shape: Tuple[int, ...], mask: Optional[Tensor]) -> Tensor:
    if mask is None:
        return np.ones(shape, dtype=np.float64)
    mask = as_tensor(mask)
    _require(mask.shape == shape, f"mask {mask.shape} does not match {shape}")
    return mask


def mse_loss(pred: Tensor, target: Tensor, mask: Optional[Tensor] = None) -> Tuple[float, Tensor]:
    """
    Mean squared error over unmasked elements.

    Returns:
        (loss, dpred); masked positions get zero gradient

    Raises:
        AllMasked: no element is unmasked
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _require(pred.shape == target.shape, f"mse: pred {pred.shape} vs target {target.shape}")
    mask = _mask_for(pred.shape, mask)
    n = mask.sum()
    if n == 0:
        raise AllMasked("mse_loss: every element is masked")
    diff = (pred - target) * mask
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def nll_loss(log_probs: Tensor, targets: Sequence[int],
             mask: Optional[Tensor] = None) -> Tuple[float, Tensor]:
    """Negative log-likelihood of integer targets under row-wise log-probabilities."""
    log_probs = as_tensor(log_probs)
    targets = np.asarray(targets, dtype=np.int64)
    _require(log_probs.ndim == 2 and targets.shape == (log_probs.shape[0],),
             f"nll: log_probs {log_probs.shape} vs targets {targets.shape}")
    _require(bool(np.all((targets >= 0) & (targets < log_probs.shape[1]))),
             f"nll: targets outside [0, {log_probs.shape[1]})")
    mask = _mask_for(targets.shape, mask)
    n = mask.sum()
    if n == 0:
        raise AllMasked("nll_loss: every row is masked")
    rows = np.arange(targets.shape[0])
    loss = -float(np.sum(log_probs[rows, targets] * mask) / n)
    grad = np.zeros_like(log_probs)
    grad[rows, targets] = -mask / n
    return loss, grad


def bce_loss(prob: Tensor, target: Tensor, mask: Optional[Tensor] = None,
             eps: float = 1e-12) -> Tuple[float, Tensor]:
    """Binary log-loss over probabilities in (0, 1)."""
    prob, target = as_tensor(prob), as_tensor(target)
    _require(prob.shape == target.shape, f"bce: prob {prob.shape} vs target {target.shape}")
    mask = _mask_for(prob.shape, mask)
    n = mask.sum()
    if n == 0:
        raise AllMasked("bce_loss: every element is masked")
    p = np.clip(prob, eps, 1.0 - eps)
    loss = -float(np.sum(mask * (target * np.log(p) + (1.0 - target) * np.log(1.0 - p))) / n)
    grad = mask * (p - target) / (p * (1.0 - p)) / n
    return loss, grad


# ---------------------------------------------------------------------------
# Optimisation and verification
# ---------------------------------------------------------------------------

def sgd_step(params: ParamSet, lr: float) -> None:
    """value <- value - lr * grad for every parameter, then zero the gradients."""
    if lr <= 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    for name in params:
        value = params[name]
        value -= lr * params.grad(name)
    params.zero_grad()


def grad_check(fn: Callable[[ParamSet], float], params: ParamSet,
               eps: float = 1e-5, floor: float = 1e-3) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        fn: computes a scalar loss and accumulates its analytic gradient into params
        params: parameters to perturb (restored on return)
        eps: finite-difference step
        floor: lower bound of the relative-error denominator, so coordinates
            with near-zero gradient are judged on absolute error

    Returns:
        Max over all coordinates of |analytic - numeric| / max(|analytic| + |numeric|, floor)
    """
    params.zero_grad()
    fn(params)
    analytic = {name: params.grad(name).copy() for name in params}

    worst = 0.0
    for name in params:
        flat = params[name].reshape(-1)
        expected = analytic[name].reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            params.zero_grad()
            loss_plus = fn(params)
            flat[k] = original - eps
            params.zero_grad()
            loss_minus = fn(params)
            flat[k] = original
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            error = abs(numeric - expected[k]) / max(abs(numeric) + abs(expected[k]), floor)
            worst = max(worst, error)
    params.zero_grad()
    return worst


def all_finite(*tensors: Tensor) -> bool:
    return all(bool(np.all(np.isfinite(t))) for t in tensors)
