"""Multilayer perceptron trained by mini-batch SGD with momentum.

This is the trainable network for every role in the pipeline: the
source model, the cluster-refit model, the longer-trained baseline, and
the distilled student.  ReLU trunk, one or more softmax classification
heads sharing the trunk, learning rate halved at ``s`` equally spaced
steps over the run.  Everything is float64 numpy; gradients are exact
analytic backprop.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import ConfigError, DivergenceError, ShapeError, ValidationError
from .store import FeatureMatrix, LabelVector

_CKPT_MAGIC = b"CFM1"


@dataclass(eq=False)
class MlpModel:
    """Weights of a ReLU MLP with one or more softmax heads.

    ``trunk`` is a list of (W, b) pairs; the activation after the last
    trunk layer is the penultimate representation the heads read.
    """

    input_dim: int
    hidden: tuple[int, ...]
    head_widths: tuple[int, ...]
    trunk: list[tuple[np.ndarray, np.ndarray]]
    heads: list[tuple[np.ndarray, np.ndarray]]

    @property
    def penultimate_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in self.trunk + self.heads)

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.input_dim, self.hidden, self.head_widths,
            [(w.copy(), b.copy()) for w, b in self.trunk],
            [(w.copy(), b.copy()) for w, b in self.heads],
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr0: float = 0.1
    lr_halvings: int = 13  # equally spaced over the run
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if self.lr_halvings < 0:
            raise ConfigError("lr_halvings must be >= 0")


@dataclass(frozen=True, eq=False)
class DistillConfig:
    """Soft-target distillation: alpha weights the temperature-softened
    teacher term, 1-alpha the hard-label cross-entropy."""

    teacher: MlpModel
    T: float = 20.0
    alpha: float = 0.75

    def __post_init__(self):
        if self.T <= 0:
            raise ConfigError("temperature must be > 0")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha must be in [0, 1]")


def init_model(widths, seed: int, num_heads: int = 1) -> MlpModel:
    """Build a model from a flat width tuple (input, hidden..., heads...).

    The last ``num_heads`` entries are head widths.  Hidden weights are
    zero-mean normal scaled by 1/sqrt(fan_in); head weights and all
    biases start at zero, so the initial CE loss is exactly ln(C).
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 1 + num_heads:
        raise ConfigError(f"need input plus {num_heads} head widths, got {widths}")
    if any(w < 1 for w in widths):
        raise ConfigError(f"zero-width layer in {widths}")
    input_dim = widths[0]
    head_widths = widths[len(widths) - num_heads:]
    hidden = widths[1:len(widths) - num_heads]
    rng = np.random.default_rng(seed)
    trunk = []
    fan_in = input_dim
    for h in hidden:
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, h))
        trunk.append((w, np.zeros(h)))
        fan_in = h
    heads = [(np.zeros((fan_in, c)), np.zeros(c)) for c in head_widths]
    return MlpModel(input_dim, hidden, head_widths, trunk, heads)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_parts(model: MlpModel, X: np.ndarray):
    """Trunk pre-activations, activations, head logits."""
    pre, act = [], []
    a = X
    for w, b in model.trunk:
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0)
        act.append(a)
    logits = [a @ w + b for w, b in model.heads]
    return pre, act, logits


def forward(model: MlpModel, batch: FeatureMatrix | np.ndarray):
    """Per-head class probabilities plus penultimate activations."""
    X = batch.data if isinstance(batch, FeatureMatrix) else np.asarray(batch, dtype=np.float64)
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"batch has d={X.shape[1]} but model expects {model.input_dim}")
    pre, act, logits = _forward_parts(model, X)
    penult = act[-1] if act else X
    return [_softmax(z) for z in logits], penult


def extract_features(model: MlpModel, inputs: FeatureMatrix) -> FeatureMatrix:
    """Penultimate activations for all rows; the model is not touched."""
    _, penult = forward(model, inputs)
    return FeatureMatrix(penult)


def _ce_from_probs(probs: np.ndarray, y: np.ndarray) -> float:
    # A fully saturated wrong prediction yields inf, which the training
    # loop reports as divergence rather than masking.
    with np.errstate(divide="ignore"):
        return float(-np.log(probs[np.arange(len(y)), y]).mean())


def _normalize_loss(loss):
    """Canonical (kind, payload) pair for a loss spec."""
    if loss == "ce" or loss is None:
        return "ce", None
    if isinstance(loss, DistillConfig):
        return "distill", loss
    if loss == "multitask":
        return "multitask", None
    raise ConfigError(f"unknown loss spec {loss!r}")


def loss_and_grad(model: MlpModel, batch, labels, loss="ce"):
    """Scalar loss and gradients shaped like the parameters.

    ``labels`` is one integer vector (ce/distill) or a list of vectors,
    one per head (multitask).  Distillation: the soft term compares
    teacher and student logits both divided by T and is scaled by T^2 so
    soft-gradient magnitude stays comparable across temperatures; the
    hard term is plain CE.  Total = alpha * soft + (1 - alpha) * hard.
    """
    kind, payload = _normalize_loss(loss)
    X = batch.data if isinstance(batch, FeatureMatrix) else np.asarray(batch, dtype=np.float64)
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"batch has d={X.shape[1]} but model expects {model.input_dim}")
    B = X.shape[0]
    pre, act, logits = _forward_parts(model, X)
    penult = act[-1] if act else X

    label_list = labels if isinstance(labels, (list, tuple)) else [labels]
    label_list = [l.labels if isinstance(l, LabelVector) else np.asarray(l) for l in label_list]
    for h, y in enumerate(label_list):
        if y is not None and len(y) and y.max() >= model.head_widths[h]:
            raise ValidationError(
                f"label {y.max()} out of range for head {h} of width {model.head_widths[h]}"
            )

    dlogits = [None] * len(model.heads)
    if kind == "ce":
        y = label_list[0]
        probs = _softmax(logits[0])
        total = _ce_from_probs(probs, y)
        g = probs.copy()
        g[np.arange(B), y] -= 1.0
        dlogits[0] = g / B
    elif kind == "multitask":
        if len(label_list) != len(model.heads):
            raise ShapeError(
                f"multitask needs {len(model.heads)} label vectors, got {len(label_list)}"
            )
        total = 0.0
        for h, y in enumerate(label_list):
            probs = _softmax(logits[h])
            total += _ce_from_probs(probs, y)
            g = probs.copy()
            g[np.arange(B), y] -= 1.0
            dlogits[h] = g / B
    else:  # distill
        cfg: DistillConfig = payload
        y = label_list[0]
        T, alpha = cfg.T, cfg.alpha
        _, _, t_logits = _forward_parts(cfg.teacher, X)
        q = _softmax(t_logits[0] / T)
        p_soft = _softmax(logits[0] / T)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_p = np.log(p_soft)
            soft_terms = np.where(q > 0, q * log_p, 0.0)
        soft = float(-soft_terms.sum(axis=1).mean())
        probs = _softmax(logits[0])
        hard = _ce_from_probs(probs, y)
        total = alpha * T * T * soft + (1.0 - alpha) * hard
        g_hard = probs.copy()
        g_hard[np.arange(B), y] -= 1.0
        dlogits[0] = alpha * T * (p_soft - q) / B + (1.0 - alpha) * g_hard / B

    # Backprop through heads into the shared trunk.
    head_grads = []
    dpenult = np.zeros_like(penult)
    for (w, b), dz in zip(model.heads, dlogits):
        if dz is None:
            head_grads.append((np.zeros_like(w), np.zeros_like(b)))
            continue
        head_grads.append((penult.T @ dz, dz.sum(axis=0)))
        dpenult += dz @ w.T
    trunk_grads = [None] * len(model.trunk)
    da = dpenult
    for i in range(len(model.trunk) - 1, -1, -1):
        w, b = model.trunk[i]
        dz = da * (pre[i] > 0.0)
        a_prev = act[i - 1] if i > 0 else X
        trunk_grads[i] = (a_prev.T @ dz, dz.sum(axis=0))
        da = dz @ w.T
    return total, (trunk_grads, head_grads)


def lr_at_step(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """LR for 1-based step: lr0 halved at lr_halvings equally spaced steps."""
    if cfg.lr_halvings == 0 or total_steps == 0:
        return cfg.lr0
    return cfg.lr0 * 2.0 ** (-(step * cfg.lr_halvings // total_steps))


def train(widths, features: FeatureMatrix, labels, cfg: TrainConfig,
          loss="ce", num_heads: int | None = None) -> tuple[MlpModel, list[float]]:
    """Train a freshly initialized model; returns (model, per-epoch mean loss).

    Deterministic under ``cfg.seed``: one stream drives both the
    initialization and the per-epoch shuffles, and batches are visited
    in a fixed order.
    """
    if num_heads is None:
        num_heads = len(labels) if isinstance(labels, (list, tuple)) else 1
    model = init_model(widths, cfg.seed, num_heads=num_heads)
    if isinstance(loss, DistillConfig) and loss.teacher.input_dim != model.input_dim:
        raise ShapeError("teacher and student disagree on input width")
    X = features.data
    n = X.shape[0]
    label_arrays = labels if isinstance(labels, (list, tuple)) else [labels]
    label_arrays = [l.labels if isinstance(l, LabelVector) else np.asarray(l) for l in label_arrays]

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F]))
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    velocity = None
    epoch_losses = []
    step = 0
    for _epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        running = 0.0
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch_labels = [y[idx] for y in label_arrays]
            if len(batch_labels) == 1:
                batch_labels = batch_labels[0]
            step += 1
            value, (tg, hg) = loss_and_grad(model, X[idx], batch_labels, loss)
            if not np.isfinite(value):
                raise DivergenceError(step)
            running += value * len(idx)
            lr = lr_at_step(cfg, step, total_steps)
            grads = tg + hg
            params = model.trunk + model.heads
            if velocity is None:
                velocity = [(np.zeros_like(w), np.zeros_like(b_)) for w, b_ in params]
            for (w, b_), (gw, gb), (vw, vb) in zip(params, grads, velocity):
                np.multiply(vw, cfg.momentum, out=vw)
                vw -= lr * (gw + cfg.weight_decay * w)
                w += vw
                np.multiply(vb, cfg.momentum, out=vb)
                vb -= lr * gb
                b_ += vb
        epoch_losses.append(running / n)
    return model, epoch_losses


def save_model(model: MlpModel, path, seed: int = 0, epoch: int = 0) -> None:
    """Checkpoint: magic, u32 JSON length, JSON header, float32 LE blob."""
    header = json.dumps({
        "input_dim": model.input_dim,
        "hidden": list(model.hidden),
        "head_widths": list(model.head_widths),
        "seed": seed,
        "epoch": epoch,
    }).encode()
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for w, b in model.trunk + model.heads for a in (w, b)
    )
    Path(path).write_bytes(_CKPT_MAGIC + struct.pack("<I", len(header)) + header + blob)


def load_model(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValidationError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    meta = json.loads(raw[8:8 + hlen])
    model = init_model(
        [meta["input_dim"], *meta["hidden"], *meta["head_widths"]],
        seed=0, num_heads=len(meta["head_widths"]),
    )
    offset = 8 + hlen
    for w, b in model.trunk + model.heads:
        for a in (w, b):
            count = a.size
            vals = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            a[...] = vals.reshape(a.shape)
            offset += 4 * count
    if offset != len(raw):
        raise ValidationError(f"{path}: parameter blob size mismatch")
    return model


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """Estimator wrapper over :func:`train` for single-head CE models."""

    def __init__(self, hidden=(64,), epochs=10, batch_size=256, lr0=0.1,
                 lr_halvings=13, momentum=0.9, weight_decay=0.0, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_halvings = lr_halvings
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y):
        feats = X if isinstance(X, FeatureMatrix) else FeatureMatrix(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64)
        n_classes = int(y.max()) + 1
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr0,
                          lr_halvings=self.lr_halvings, momentum=self.momentum,
                          weight_decay=self.weight_decay, seed=self.seed)
        widths = (feats.d, *self.hidden, n_classes)
        self.model_, self.loss_curve_ = train(widths, feats, y, cfg)
        return self

    def predict_proba(self, X):
        probs, _ = forward(self.model_, np.asarray(X, dtype=np.float64))
        return probs[0]

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def transform(self, X):
        feats = X if isinstance(X, FeatureMatrix) else FeatureMatrix(np.asarray(X, dtype=np.float64))
        return extract_features(self.model_, feats).data
