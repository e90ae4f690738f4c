"""Downstream learning networks trained jointly with the feature mask."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import ShapeError, leaky_relu, leaky_relu_grad, softmax_stable

LEAKY_SLOPE = 0.2
PROB_FLOOR = 1e-12


class CacheError(RuntimeError):
    pass


@dataclass
class Dense:
    W: np.ndarray  # in x out
    b: np.ndarray
    activation: str  # "leaky_relu" | "linear" | "softmax"


@dataclass
class LearnerParams:
    layers: list[Dense]
    # rate of inverted dropout applied to the *input* of layer i
    dropout: dict[int, float] = field(default_factory=dict)
    kind: str = "classifier"

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i - 1].W.shape[1] != self.layers[i].W.shape[0]:
                raise ShapeError(f"layer {i - 1} -> {i} widths do not chain")
        for i, r in self.dropout.items():
            if not 0.0 <= r < 1.0:
                raise ValueError(f"dropout rate {r} at layer {i} outside [0, 1)")

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].W.shape[0]] + [l.W.shape[1] for l in self.layers]

    @property
    def output_width(self) -> int:
        return self.layers[-1].W.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def astype(self, dtype) -> "LearnerParams":
        layers = [Dense(l.W.astype(dtype), l.b.astype(dtype), l.activation) for l in self.layers]
        return LearnerParams(layers, dict(self.dropout), self.kind)


@dataclass
class LossValue:
    scalar: float
    kind: str


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer, after dropout
    pre: list[np.ndarray]  # pre-activations
    keep: dict[int, np.ndarray]  # scaled dropout keep masks
    output: np.ndarray
    n_layers: int


def _glorot(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _build(widths, activations, rng, dtype, dropout, kind):
    layers = [
        Dense(_glorot(rng, a, b, dtype), np.zeros(b, dtype), act)
        for a, b, act in zip(widths[:-1], widths[1:], activations)
    ]
    return LearnerParams(layers, dropout, kind)


def build_classifier(d_in: int, n_classes: int, rng: np.random.Generator,
                     dtype=np.float64) -> LearnerParams:
    """d_in -> 128 -> 64 (LeakyReLU 0.2) -> dropout 0.3 -> n_classes softmax."""
    if d_in < 1 or n_classes < 2:
        raise ValueError(f"need d_in >= 1 and n_classes >= 2, got {d_in}, {n_classes}")
    return _build([d_in, 128, 64, n_classes], ["leaky_relu", "leaky_relu", "softmax"],
                  rng, dtype, {2: 0.3}, "classifier")


def build_autoencoder(d_in: int, rng: np.random.Generator, dtype=np.float64) -> LearnerParams:
    """d_in -> 128 -> 64 -> 128 (LeakyReLU 0.2) -> d_in linear."""
    if d_in < 1:
        raise ValueError(f"need d_in >= 1, got {d_in}")
    return _build([d_in, 128, 64, 128, d_in],
                  ["leaky_relu", "leaky_relu", "leaky_relu", "linear"],
                  rng, dtype, {}, "autoencoder")


def _activate(a, kind):
    if kind == "leaky_relu":
        return leaky_relu(a, LEAKY_SLOPE)
    if kind == "softmax":
        return softmax_stable(a, axis=1)
    if kind == "linear":
        return a
    raise ValueError(f"unknown activation {kind!r}")


def forward(g: LearnerParams, x_batch: np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardCache]:
    if x_batch.ndim != 2 or x_batch.shape[1] != g.layers[0].W.shape[0]:
        raise ShapeError(
            f"expected input width {g.layers[0].W.shape[0]}, got shape {x_batch.shape}")
    if train_mode and g.dropout and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    h = x_batch
    inputs, pre, keep = [], [], {}
    for i, layer in enumerate(g.layers):
        rate = g.dropout.get(i, 0.0)
        if train_mode and rate > 0:
            k = (rng.random(h.shape) >= rate).astype(h.dtype) / h.dtype.type(1.0 - rate)
            keep[i] = k
            h = h * k
        inputs.append(h)
        a = h @ layer.W + layer.b
        pre.append(a)
        h = _activate(a, layer.activation)
    return h, ForwardCache(inputs, pre, keep, h, len(g.layers))


def loss_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> LossValue:
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"{labels.shape} labels for {probs.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"label outside [0, {probs.shape[1]})")
    p = np.maximum(probs[np.arange(labels.size), labels], PROB_FLOOR)
    return LossValue(float(-np.mean(np.log(p))), "cross_entropy")


def cross_entropy_logit_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the softmax logits: (p - onehot) / B."""
    g = probs.copy()
    g[np.arange(labels.size), labels] -= 1
    return g / labels.size


def loss_mse(recon: np.ndarray, target: np.ndarray) -> LossValue:
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {recon.shape} vs target {target.shape}")
    d = recon - target
    return LossValue(float(np.mean(d * d)), "mse")


def mse_grad(recon: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (recon - target) / recon.size


def backward(g: LearnerParams, cache: ForwardCache, loss_grad: np.ndarray, *,
             wrt_logits: bool = False) -> tuple[list[np.ndarray], np.ndarray]:
    """Backprop through all layers.

    Returns ``([dW0, db0, dW1, db1, ...], d_input)``. With ``wrt_logits`` the
    incoming gradient is taken w.r.t. the last layer's pre-activation, which
    is how the fused softmax/cross-entropy gradient enters.
    """
    if cache.n_layers != len(g.layers) or loss_grad.shape != cache.output.shape:
        raise CacheError("cache does not belong to this network/output")
    grads: list[np.ndarray] = [None] * (2 * len(g.layers))
    d = loss_grad
    for i in reversed(range(len(g.layers))):
        layer = g.layers[i]
        a = cache.pre[i]
        if i == len(g.layers) - 1 and wrt_logits:
            da = d
        elif layer.activation == "leaky_relu":
            da = d * leaky_relu_grad(a, LEAKY_SLOPE)
        elif layer.activation == "linear":
            da = d
        elif layer.activation == "softmax":
            s = softmax_stable(a, axis=1)
            da = s * (d - np.sum(d * s, axis=1, keepdims=True))
        else:
            raise ValueError(f"unknown activation {layer.activation!r}")
        grads[2 * i] = cache.inputs[i].T @ da
        grads[2 * i + 1] = da.sum(axis=0)
        d = da @ layer.W.T
        if i in cache.keep:
            d = d * cache.keep[i]
    return grads, d
