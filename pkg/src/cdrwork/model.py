"""Feedforward binary classifier trained with mini-batch SGD.

Hidden units use the softplus rectifier ``ln(1 + e^a)``, the single output
unit a logistic sigmoid, and the loss is binary cross-entropy. Dropout is
inverted: kept activations are divided by the keep probability during
training, so stored weights are used as-is for inference.

Weight matrices are stored ``(n_in, n_out)`` so that ``W[i, j]`` connects
unit ``i`` of one layer to unit ``j`` of the next.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .prep import Normalizer

MODEL_FORMAT = "cdrwork-model"
MODEL_FORMAT_VERSION = 1

_P_MAX = 1.0 - np.finfo(float).eps / 2
_P_MIN = np.finfo(float).tiny


class TrainingError(RuntimeError):
    pass


class ModelInputError(ValueError):
    pass


def softplus(a):
    """``ln(1 + e^a)``, overflow-safe.

    Evaluated as ``max(0, a) + ln(1 + e^-|a|)``, which is
    ``a + ln(1 + e^-a)`` for positive ``a`` and never overflows.
    """
    a = np.asarray(a, dtype=float)
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return out if out.ndim else float(out)


def sigmoid(a):
    """Logistic function as ``exp(-softplus(-a))``; no overflow for any finite ``a``."""
    out = np.exp(-np.logaddexp(0.0, np.negative(a)))
    return out if np.ndim(out) else float(out)


# The derivative of softplus is the logistic sigmoid.
softplus_derivative = sigmoid


def _sigmoid_from_softplus(sp: np.ndarray) -> np.ndarray:
    # exp(-softplus(a)) = 1 - sigmoid(a); expm1 keeps small values accurate
    return -np.expm1(-sp)


@dataclass(frozen=True)
class ModelSpec:
    hidden_sizes: tuple[int, ...] = (64, 64)
    input_dropout: float = 0.1
    hidden_dropout: float = 0.2
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not self.hidden_sizes:
            raise ValueError("at least one hidden layer is required")
        if any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("layer sizes must be positive")
        for rate in (self.input_dropout, self.hidden_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must lie in [0, 1)")
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate, epochs and batch_size must be positive")

    def layer_sizes(self, n_inputs: int) -> list[int]:
        return [n_inputs, *self.hidden_sizes, 1]

    def dropout_rates(self) -> list[float]:
        """Rate applied to the input of each weight layer."""
        return [self.input_dropout] + [self.hidden_dropout] * len(self.hidden_sizes)


@dataclass
class Network:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def initialize(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Network":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardPass:
    inputs: list[np.ndarray]   # input to each weight layer, after dropout
    pre: list[np.ndarray]      # pre-activations of each layer
    hidden: list[np.ndarray]   # softplus outputs of the hidden layers, before dropout
    masks: list[np.ndarray | None]
    logit: np.ndarray
    prob: np.ndarray


def sample_masks(rng: np.random.Generator, batch: int, net: Network,
                 rates: Sequence[float], as_bool: bool = False) -> list[np.ndarray | None]:
    """One inverted-dropout mask per weight layer input, drawn per example.

    Masks hold ``1 / keep`` for kept units and 0 for dropped ones; with
    ``as_bool`` the raw keep flags are returned instead.
    """
    masks = []
    for n_in, rate in zip(net.sizes[:-1], rates):
        if rate <= 0:
            masks.append(None)
            continue
        keep = 1.0 - rate
        kept = rng.random((batch, n_in), dtype=np.float32) < keep
        masks.append(kept if as_bool else kept / keep)
    return masks


def forward(net: Network, x: np.ndarray, masks: Sequence[np.ndarray | None] | None = None) -> ForwardPass:
    """Run the network on a batch ``x`` of shape ``(n, n_inputs)``.

    ``masks=None`` is inference mode. In training mode pass the masks from
    :func:`sample_masks`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.sizes[0]:
        raise ModelInputError(f"input has {x.shape[1]} columns, network expects {net.sizes[0]}")
    n_layers = len(net.weights)
    masks = list(masks) if masks is not None else [None] * n_layers
    inputs, pre, hidden = [], [], []
    a = x
    for layer in range(n_layers):
        if masks[layer] is not None:
            a = a * masks[layer]
        inputs.append(a)
        z = a @ net.weights[layer] + net.biases[layer]
        pre.append(z)
        if layer < n_layers - 1:
            a = softplus(z)
            hidden.append(a)
    logit = pre[-1][:, 0]
    prob = np.clip(sigmoid(logit), _P_MIN, _P_MAX)
    return ForwardPass(inputs, pre, hidden, masks, logit, prob)


def bce_from_logits(logit: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy computed stably from logits."""
    return float(np.mean(softplus(logit) - y * logit))


def backward(net: Network, fp: ForwardPass, y: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of the mean BCE with respect to every weight and bias."""
    n = fp.logit.shape[0]
    delta = ((sigmoid(fp.logit) - y) / n)[:, None]
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for layer in range(len(net.weights) - 1, -1, -1):
        gw[layer] = fp.inputs[layer].T @ delta
        gb[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        upstream = delta @ net.weights[layer].T
        if fp.masks[layer] is not None:
            upstream = upstream * fp.masks[layer]
        delta = upstream * _sigmoid_from_softplus(fp.hidden[layer - 1])
    return gw, gb


def loss_and_gradients(net: Network, x, y, masks=None):
    fp = forward(net, x, masks)
    y = np.asarray(y, dtype=float)
    return bce_from_logits(fp.logit, y), *backward(net, fp, y)


def train_sgd(x: np.ndarray, y: np.ndarray, spec: ModelSpec,
              rng: np.random.Generator | None = None) -> tuple[Network, list[float]]:
    """Fit a network by mini-batch SGD; returns it with the loss trace.

    The trace holds the mean training-mode (dropout on) loss of each epoch.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ValueError("x must be (n, d) with one label per row")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    net = Network.initialize(spec.layer_sizes(x.shape[1]), rng)
    rates = spec.dropout_rates()
    inv_keep = [1.0 / (1.0 - r) for r in rates]
    lr = spec.learning_rate
    n = x.shape[0]
    trace = []
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        masks = [None if m is None else m * scale
                 for m, scale in zip(sample_masks(rng, n, net, rates, as_bool=True), inv_keep)]
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            loss = _sgd_epoch(net, x, y, order, masks, lr, spec.batch_size)
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite loss in epoch {epoch + 1} with learning_rate={lr}; "
                "lower the learning rate or check inputs for extreme values")
        trace.append(loss)
    return net, trace


def _sgd_epoch(net: Network, x, y, order, masks, lr: float, batch_size: int) -> float:
    """One pass of in-place SGD updates; returns the mean minibatch loss.

    Same arithmetic as ``forward`` + ``backward`` with ``masks`` (already
    scaled by ``1 / keep``) sliced per batch, minus the bookkeeping; kept
    separate because it is the hot loop.
    """
    weights, biases = net.weights, net.biases
    n_layers = len(weights)
    last = n_layers - 1
    losses = []
    for start in range(0, len(order), batch_size):
        stop = start + batch_size
        idx = order[start:stop]
        nb = len(idx)
        yb = y[idx]
        a = x[idx]
        inputs, hidden = [], []
        for layer in range(n_layers):
            if masks[layer] is not None:
                a = a * masks[layer][start:stop]
            inputs.append(a)
            z = a @ weights[layer] + biases[layer]
            if layer < last:
                a = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
                hidden.append(a)
        logit = z[:, 0]
        sp_neg = np.logaddexp(0.0, -logit)
        losses.append(float(np.sum(sp_neg + (1.0 - yb) * logit)))
        delta = ((np.exp(-sp_neg) - yb) / nb)[:, None]
        for layer in range(last, -1, -1):
            gw = inputs[layer].T @ delta
            gb = delta.sum(axis=0)
            if layer:
                if layer == last:
                    upstream = delta * weights[layer][:, 0]
                else:
                    upstream = delta @ weights[layer].T
                if masks[layer] is not None:
                    upstream = upstream * masks[layer][start:stop]
                delta = upstream * -np.expm1(-hidden[layer - 1])
            weights[layer] -= lr * gw
            biases[layer] -= lr * gb
    return math.fsum(losses) / len(order)


@dataclass
class TrainedModel:
    profession: str
    spec: ModelSpec
    network: Network
    normalizer: Normalizer
    schema_hash: str
    schema_version: int
    loss_trace: list[float] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return self.normalizer.columns

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "format_version": MODEL_FORMAT_VERSION,
            "profession": self.profession,
            "schema_hash": self.schema_hash,
            "schema_version": self.schema_version,
            "spec": asdict(self.spec),
            "normalization": self.normalizer.to_dict(),
            "layers": [
                {"weights": w.tolist(), "biases": b.tolist()}
                for w, b in zip(self.network.weights, self.network.biases)
            ],
            "loss_trace": list(self.loss_trace),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False, separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        if d.get("format") != MODEL_FORMAT or d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelInputError("not a cdrwork model document (or unsupported version)")
        spec_d = dict(d["spec"])
        spec_d["hidden_sizes"] = tuple(spec_d["hidden_sizes"])
        net = Network(
            [np.array(layer["weights"], dtype=float).reshape(-1, len(layer["biases"])) for layer in d["layers"]],
            [np.array(layer["biases"], dtype=float) for layer in d["layers"]],
        )
        return cls(d["profession"], ModelSpec(**spec_d), net, Normalizer.from_dict(d["normalization"]),
                   d["schema_hash"], d["schema_version"], list(d.get("loss_trace", [])))

    @classmethod
    def from_json(cls, text: str) -> "TrainedModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainedModel":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing model file: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"))


def predict(model: TrainedModel, features: np.ndarray, names: Sequence[str]) -> np.ndarray:
    """Probabilities for raw (un-normalized, possibly NaN) feature rows."""
    x = model.normalizer.transform(features, names)
    return forward(model.network, x).prob


def classify(p, threshold: float = 0.5):
    """``True`` (positive) where ``p >= threshold``; ties go positive."""
    return np.asarray(p) >= threshold
