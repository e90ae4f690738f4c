"""Joint minibatch training of the feature mask module and a downstream network."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import learn_nets as ln
from .data_io import DatasetTable, make_batches
from .fm_module import (
    FeatureMask,
    FmParams,
    default_e_width,
    fm_backward_batch,
    fm_extract_final_mask,
    fm_forward_batch,
    fm_init,
)
from .tensor_core import ShapeError, spawn_rngs

CHECKPOINT_MAGIC = b"fmv1\n"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Ablation:
    use_batch_attenuation: bool = True
    use_mask_normalization: bool = True


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    mode: str = "supervised"
    ablation: Ablation = field(default_factory=Ablation)
    init_scheme: str = "xavier"
    e_width: int | None = None
    # fixed optimizer-step budget; overrides `epochs` when set
    steps: int | None = None
    dtype: str = "float32"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.mode not in ("supervised", "unsupervised"):
            raise ConfigError(f"mode must be supervised or unsupervised, got {self.mode!r}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "ablation" in d and isinstance(d["ablation"], dict):
            d["ablation"] = Ablation(**d["ablation"])
        return cls(**d)


@dataclass
class TrainedModel:
    fm: FmParams
    learner: ln.LearnerParams
    final_mask: FeatureMask
    loss_history: list[float]
    config: TrainConfig
    n_steps: int = 0


# --- optimizers --------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, t: int) -> tuple[list[np.ndarray], AdamState]:
    """In-place bias-corrected Adam update (beta1=0.9, beta2=0.999, eps=1e-8)."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    state.t = t
    return params, state


def sgd_step(params, grads, lr: float):
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
        p -= lr * g
    return params


# --- objective ---------------------------------------------------------------

def objective_terms(mode: str, output: np.ndarray, x_batch: np.ndarray,
                    labels: np.ndarray | None) -> dict[str, tuple[ln.LossValue, np.ndarray]]:
    """Every summand of the training objective with its output gradient.

    There is deliberately exactly one: the downstream task loss. The
    supervised gradient is w.r.t. the softmax logits (fused form).
    """
    if mode == "supervised":
        return {"cross_entropy": (ln.loss_cross_entropy(output, labels),
                                  ln.cross_entropy_logit_grad(output, labels))}
    # reconstruct the unmasked input
    return {"mse": (ln.loss_mse(output, x_batch), ln.mse_grad(output, x_batch))}


def joint_loss_and_grads(fm: FmParams, learner: ln.LearnerParams, x_batch: np.ndarray,
                         labels: np.ndarray | None, mode: str, ablation: Ablation,
                         rng: np.random.Generator | None, train_mode: bool = True):
    """One forward/backward pass through FM-module and learner.

    Returns ``(loss, fm_grads, learner_grads, fm_output)``.
    """
    ba, fmn = ablation.use_batch_attenuation, ablation.use_mask_normalization
    out = fm_forward_batch(x_batch, fm, attenuate=ba, normalize=fmn)
    pred, cache = ln.forward(learner, out.masked_batch, train_mode, rng)
    terms = objective_terms(mode, pred, x_batch, labels)
    (loss, grad), = terms.values()
    g_grads, d_masked = ln.backward(learner, cache, grad, wrt_logits=(mode == "supervised"))
    fm_grads, _ = fm_backward_batch(x_batch, fm, d_masked, attenuate=ba, normalize=fmn, out=out)
    return loss.scalar, fm_grads, g_grads, out


# --- training ----------------------------------------------------------------

def _resolve_e(cfg: TrainConfig, d: int) -> int:
    return cfg.e_width if cfg.e_width is not None else default_e_width(d)


def train(dataset: DatasetTable, cfg: TrainConfig, on_batch=None) -> TrainedModel:
    """Minimize the single task loss jointly over FM and learner parameters.

    ``on_batch(epoch, batch, fm_output)`` is an optional observer hook.
    """
    cfg.validate()
    if cfg.mode == "supervised" and dataset.labels is None:
        raise ConfigError("supervised training needs a labelled dataset")
    dtype = np.dtype(cfg.dtype)
    x_all = dataset.features.astype(dtype)
    labels = dataset.labels if cfg.mode == "supervised" else None
    n, d = x_all.shape

    rng_fm, rng_g, rng_shuffle, rng_drop = spawn_rngs(cfg.seed, 4)
    fm = fm_init(d, _resolve_e(cfg, d), cfg.init_scheme, rng_fm, dtype)
    if cfg.mode == "supervised":
        learner = ln.build_classifier(d, dataset.n_classes, rng_g, dtype)
    else:
        learner = ln.build_autoencoder(d, rng_g, dtype)

    params = fm.arrays() + learner.arrays()
    adam = AdamState.zeros_like(params) if cfg.optimizer == "adam" else None

    if cfg.steps is not None:
        per_epoch = math.ceil(n / cfg.batch_size)
        n_epochs = math.ceil(cfg.steps / per_epoch)
    else:
        n_epochs = cfg.epochs

    history: list[float] = []
    t = 0
    for epoch in range(n_epochs):
        total, seen = 0.0, 0
        for b, idx in enumerate(make_batches(n, cfg.batch_size, rng_shuffle)):
            xb = x_all[idx]
            yb = None if labels is None else labels[idx]
            loss, fm_g, g_g, out = joint_loss_and_grads(
                fm, learner, xb, yb, cfg.mode, cfg.ablation, rng_drop)
            grads = fm_g.arrays() + g_g
            # clipped cross-entropy can stay finite while the gradients blow up
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise DivergenceError(epoch, b, loss)
            if on_batch is not None:
                on_batch(epoch, b, out)
            t += 1
            if adam is not None:
                adam_step(params, grads, adam, cfg.learning_rate, t)
            else:
                sgd_step(params, grads, cfg.learning_rate)
            total += loss * len(idx)
            seen += len(idx)
            if cfg.steps is not None and t >= cfg.steps:
                break
        history.append(total / seen)

    mask = fm_extract_final_mask(x_all, fm, normalize=cfg.ablation.use_mask_normalization)
    mask.seed = cfg.seed
    mask.mode = cfg.mode
    return TrainedModel(fm, learner, mask, history, replace(cfg, epochs=n_epochs), t)


def train_ablated(dataset: DatasetTable, cfg: TrainConfig) -> TrainedModel:
    return train(dataset, cfg)


def unsupervised_train(dataset: DatasetTable, cfg: TrainConfig) -> TrainedModel:
    if cfg.mode != "unsupervised":
        raise ConfigError("unsupervised_train needs mode='unsupervised'")
    return train(dataset, cfg)


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(model: TrainedModel, path, extra: dict | None = None) -> Path:
    """Write ``fmv1`` magic, an 8-byte header length, a JSON header, then raw arrays."""
    path = Path(path)
    arrays = [("fm.W1", model.fm.W1), ("fm.b1", model.fm.b1),
              ("fm.W2", model.fm.W2), ("fm.b2", model.fm.b2)]
    for i, layer in enumerate(model.learner.layers):
        arrays += [(f"g{i}.W", layer.W), (f"g{i}.b", layer.b)]
    header = {
        "config": model.config.to_dict(),
        "n_steps": model.n_steps,
        "loss_history": model.loss_history,
        "mask": json.loads(model.final_mask.to_json()),
        "learner": {
            "kind": model.learner.kind,
            "activations": [l.activation for l in model.learner.layers],
            "dropout": {str(k): v for k, v in model.learner.dropout.items()},
        },
        "arrays": [{"name": k, "dtype": a.dtype.str, "shape": list(a.shape)} for k, a in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(">Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a).tobytes())
    return path


def load_checkpoint(path) -> tuple[TrainedModel, dict]:
    """Read an ``fmv1`` checkpoint; returns the model and the stored ``extra`` dict."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: missing fmv1 tag")
    try:
        buf = io.BytesIO(raw[len(CHECKPOINT_MAGIC):])
        (hlen,) = struct.unpack(">Q", buf.read(8))
        header = json.loads(buf.read(hlen))
        arrays = {}
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"]))
            data = buf.read(count * dt.itemsize)
            if len(data) != count * dt.itemsize:
                raise CheckpointError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(data, dtype=dt).reshape(spec["shape"]).copy()
        if buf.read(1):
            raise CheckpointError(f"{path}: trailing bytes after arrays")
        fm = FmParams(arrays["fm.W1"], arrays["fm.b1"], arrays["fm.W2"], arrays["fm.b2"])
        meta = header["learner"]
        layers = [ln.Dense(arrays[f"g{i}.W"], arrays[f"g{i}.b"], act)
                  for i, act in enumerate(meta["activations"])]
        learner = ln.LearnerParams(layers, {int(k): v for k, v in meta["dropout"].items()},
                                   meta["kind"])
        mask = FeatureMask.from_json(json.dumps(header["mask"]))
        cfg = TrainConfig.from_dict(header["config"])
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError, struct.error) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    model = TrainedModel(fm, learner, mask, list(header["loss_history"]), cfg, header["n_steps"])
    return model, header.get("extra", {})
