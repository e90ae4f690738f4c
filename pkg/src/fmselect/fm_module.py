"""Feature mask module.

Each row x of a minibatch goes through a two-layer transform
``z = W2 tanh(W1 x + b1) + b2``; the rows of Z are averaged over the batch
into one vector ``z_bar`` and ``m = softmax(z_bar)`` is multiplied onto every
input row. Both the averaging ("batch-wise attenuation") and the softmax
("mask normalization") can be switched off for ablation runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data_io import DatasetTable
from .tensor_core import (
    ShapeError,
    rowwise_matmul,
    sequential_row_sum,
    softmax_stable,
)

INIT_SCHEMES = ("uniform", "normal", "ones", "xavier")
DEFAULT_E = 128


@dataclass
class FmParams:
    W1: np.ndarray  # E x D
    b1: np.ndarray  # E
    W2: np.ndarray  # D x E
    b2: np.ndarray  # D

    def __post_init__(self):
        e, d = self.W1.shape
        if self.W2.shape != (d, e) or self.b1.shape != (e,) or self.b2.shape != (d,):
            raise ShapeError(
                f"inconsistent FM shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}")
        if not e < d:
            raise ValueError(f"bottleneck width E={e} must be smaller than D={d}")

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def e(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def astype(self, dtype) -> "FmParams":
        return FmParams(*(a.astype(dtype) for a in self.arrays()))


@dataclass
class FmGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class FeatureMask:
    values: np.ndarray
    ranking: np.ndarray
    seed: int | None = None
    mode: str | None = None

    @property
    def dims(self) -> int:
        return self.values.shape[0]

    def to_json(self) -> str:
        doc = {
            "dims": int(self.dims),
            "values": [float(v) for v in self.values],
            "ranking": [int(i) for i in self.ranking],
            "seed": self.seed,
            "mode": self.mode,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FeatureMask":
        doc = json.loads(text)
        values = np.array(doc["values"], dtype=np.float64)
        ranking = np.array(doc["ranking"], dtype=np.int64)
        if values.shape != (doc["dims"],) or ranking.shape != (doc["dims"],):
            raise ValueError("mask document has inconsistent dims")
        if not np.array_equal(np.sort(ranking), np.arange(doc["dims"])):
            raise ValueError("mask ranking is not a permutation")
        return cls(values, ranking, doc.get("seed"), doc.get("mode"))


@dataclass
class FmBatchOutput:
    z_bar: np.ndarray
    mask: FeatureMask
    masked_batch: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def default_e_width(d: int) -> int:
    if d <= DEFAULT_E:
        return max(2, d // 2)
    return DEFAULT_E


def fm_init(d: int, e: int, scheme: str = "xavier", rng: np.random.Generator | None = None,
            dtype=np.float64) -> FmParams:
    """Draw FM parameters. Biases start at zero for every scheme.

    uniform: U(-0.05, 0.05); normal: N(0, 0.05^2); ones: all weights 1;
    xavier: Glorot-uniform, limit sqrt(6 / (fan_in + fan_out)).
    """
    if not 0 < e < d:
        raise ValueError(f"bottleneck width must satisfy 0 < E < D, got E={e}, D={d}")
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    if scheme != "ones" and rng is None:
        raise ValueError(f"init scheme {scheme!r} needs an rng")

    def draw(shape):
        if scheme == "ones":
            return np.ones(shape)
        if scheme == "uniform":
            return rng.uniform(-0.05, 0.05, size=shape)
        if scheme == "normal":
            return rng.normal(0.0, 0.05, size=shape)
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape)

    W1 = draw((e, d))
    W2 = draw((d, e))
    return FmParams(W1.astype(dtype), np.zeros(e, dtype), W2.astype(dtype), np.zeros(d, dtype))


def fm_hidden(x_rows: np.ndarray, p: FmParams, phi=np.tanh) -> np.ndarray:
    return phi(rowwise_matmul(x_rows, p.W1.T) + p.b1)


def fm_transform(x: np.ndarray, p: FmParams, phi=np.tanh) -> np.ndarray:
    """Per-sample transform of one length-D vector. ``phi`` is a test hook."""
    x = np.asarray(x)
    if x.shape != (p.d,):
        raise ShapeError(f"expected input of length {p.d}, got shape {x.shape}")
    return p.W2 @ phi(p.W1 @ x + p.b1) + p.b2


def fm_attenuate(z_rows: np.ndarray) -> np.ndarray:
    z_rows = np.asarray(z_rows)
    if z_rows.ndim != 2 or z_rows.shape[0] < 1:
        raise ValueError(f"need a non-empty B x D batch, got shape {z_rows.shape}")
    return sequential_row_sum(z_rows) / z_rows.shape[0]


def rank_features(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    return np.argsort(-np.asarray(scores), kind="stable")


def fm_normalize(z_bar: np.ndarray) -> FeatureMask:
    z_bar = np.asarray(z_bar)
    values = softmax_stable(z_bar)
    # exp is monotone, so ranking the logits equals ranking the mask while
    # staying exact where softmax values round to the same float
    return FeatureMask(values=values, ranking=rank_features(z_bar))


def raw_mask(z_bar: np.ndarray) -> FeatureMask:
    """Mask used when normalization is ablated: the raw averaged vector."""
    z_bar = np.asarray(z_bar)
    return FeatureMask(values=z_bar.copy(), ranking=rank_features(z_bar))


def _check_batch(x_batch: np.ndarray, p: FmParams):
    if x_batch.ndim != 2 or x_batch.shape[1] != p.d:
        raise ShapeError(f"expected a B x {p.d} batch, got shape {x_batch.shape}")
    if x_batch.shape[0] < 1:
        raise ValueError("empty batch")


def fm_forward_batch(x_batch: np.ndarray, p: FmParams, *, attenuate: bool = True,
                     normalize: bool = True) -> FmBatchOutput:
    """Mask a minibatch.

    With attenuation on, one mask is shared by all rows. With it off, every
    row gets its own mask from its own z_i; ``mask`` then reports the
    batch-mean of z so a single ranking still exists.
    """
    _check_batch(x_batch, p)
    B = x_batch.shape[0]
    H = fm_hidden(x_batch, p)
    # the mean commutes with the affine output layer: mean_i(W2 h_i + b2) = W2 mean(h) + b2
    h_bar = sequential_row_sum(H) / B
    z_bar = p.W2 @ h_bar + p.b2
    cache = {"H": H}
    if attenuate:
        m = softmax_stable(z_bar) if normalize else z_bar
        masked = x_batch * m
        cache["m"] = m
        mask = FeatureMask(values=m, ranking=rank_features(z_bar))
    else:
        Z = H @ p.W2.T + p.b2
        M = softmax_stable(Z, axis=1) if normalize else Z
        masked = x_batch * M
        cache["M"] = M
        mask = fm_normalize(z_bar) if normalize else raw_mask(z_bar)
    return FmBatchOutput(z_bar=z_bar, mask=mask, masked_batch=masked, cache=cache)


def fm_backward_batch(x_batch: np.ndarray, p: FmParams, upstream_grad: np.ndarray, *,
                      attenuate: bool = True, normalize: bool = True,
                      out: FmBatchOutput | None = None) -> tuple[FmGrads, np.ndarray]:
    """Gradients of ``<upstream_grad, masked_batch>`` w.r.t. FM parameters and the batch.

    ``out`` may carry the matching forward result to avoid recomputation.
    """
    _check_batch(x_batch, p)
    if upstream_grad.shape != x_batch.shape:
        raise ShapeError(f"upstream gradient {upstream_grad.shape} vs batch {x_batch.shape}")
    if out is None:
        out = fm_forward_batch(x_batch, p, attenuate=attenuate, normalize=normalize)
    H = out.cache["H"]
    B = x_batch.shape[0]
    G = upstream_grad

    if attenuate:
        m = out.cache["m"]
        dx = G * m
        dm = np.sum(G * x_batch, axis=0)
        dz_bar = m * (dm - np.dot(m, dm)) if normalize else dm
        # every z_i receives dz_bar / B; exploit the rank-one structure
        h_bar = sequential_row_sum(H) / B
        dW2 = np.outer(dz_bar, h_bar)
        db2 = dz_bar
        dh_row = (p.W2.T @ dz_bar) / B
        dA = dh_row[None, :] * (1.0 - H * H)
    else:
        M = out.cache["M"]
        dx = G * M
        dM = G * x_batch
        if normalize:
            dZ = M * (dM - np.sum(M * dM, axis=1, keepdims=True))
        else:
            dZ = dM
        dW2 = dZ.T @ H
        db2 = dZ.sum(axis=0)
        dA = (dZ @ p.W2) * (1.0 - H * H)

    dW1 = dA.T @ x_batch
    db1 = dA.sum(axis=0)
    dx = dx + dA @ p.W1
    return FmGrads(dW1, db1, dW2, db2), dx


def fm_extract_final_mask(dataset: DatasetTable | np.ndarray, p: FmParams, *,
                          normalize: bool = True, chunk_size: int | None = None) -> FeatureMask:
    """Mask over a whole dataset: exact mean of z over all N rows, then softmax.

    Rows are accumulated one at a time in index order, so the result does not
    depend on ``chunk_size`` (a memory knob only).
    """
    x = dataset.features if isinstance(dataset, DatasetTable) else np.asarray(dataset)
    n = x.shape[0]
    if n < 1:
        raise ValueError("cannot extract a mask from an empty dataset")
    if x.shape[1] != p.d:
        raise ShapeError(f"dataset has {x.shape[1]} features, FM expects {p.d}")
    step = n if chunk_size is None else int(chunk_size)
    if step < 1:
        raise ValueError("chunk_size must be positive")
    total = None
    for start in range(0, n, step):
        H = fm_hidden(x[start:start + step].astype(p.W1.dtype, copy=False), p)
        total = sequential_row_sum(H, total)
    z_bar = p.W2 @ (total / n) + p.b2
    return fm_normalize(z_bar) if normalize else raw_mask(z_bar)
