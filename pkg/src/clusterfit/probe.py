"""Linear probes: multinomial logistic regression on fixed features.

The representation under test is never modified; only the linear
classifier trains.  Learning rate starts at ``lr0`` and drops by a
factor of 10 at two equally spaced points in the run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import ConfigError, DegenerateInputError, ShapeError
from .store import FeatureMatrix, LabelVector


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 14
    batch_size: int = 256
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")


@dataclass(frozen=True, eq=False)
class ProbeResult:
    top1: float
    train_top1: float
    num_eval: int
    per_class: np.ndarray

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "train_top1": self.train_top1,
            "num_eval": self.num_eval,
            "per_class": [float(x) for x in self.per_class],
        }


@dataclass(frozen=True, eq=False)
class LinearClassifier:
    """Softmax classifier: weights (C x d) and bias (C,)."""

    weights: np.ndarray
    bias: np.ndarray

    def decision(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights.T + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        # np.argmax breaks ties toward the lowest class id.
        return np.argmax(self.decision(X), axis=1)


def probe_fit(train_features: FeatureMatrix, train_labels: LabelVector,
              cfg: ProbeConfig) -> LinearClassifier:
    """SGD-trained multinomial logistic regression on frozen features."""
    if train_features.n != train_labels.n:
        raise ShapeError("features and labels disagree on sample count")
    present = np.unique(train_labels.labels)
    if present.size < 2:
        raise DegenerateInputError("training set contains a single class")
    X = train_features.data
    y = train_labels.labels
    n, d = X.shape
    C = train_labels.num_classes
    W = np.zeros((C, d))
    b = np.zeros(C)
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x9B]))
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    drop_points = {total_steps // 3, 2 * total_steps // 3}
    lr = cfg.lr0
    step = 0
    for _epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for k in range(n_batches):
            idx = perm[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            step += 1
            if step in drop_points:
                lr *= 0.1
            logits = X[idx] @ W.T + b
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            probs = e / e.sum(axis=1, keepdims=True)
            g = probs
            g[np.arange(len(idx)), y[idx]] -= 1.0
            g /= len(idx)
            gW = g.T @ X[idx] + cfg.weight_decay * W
            gb = g.sum(axis=0)
            vW = cfg.momentum * vW - lr * gW
            vb = cfg.momentum * vb - lr * gb
            W = W + vW
            b = b + vb
    return LinearClassifier(weights=W, bias=b)


def probe_eval(classifier: LinearClassifier, eval_features: FeatureMatrix,
               eval_labels: LabelVector,
               train_features: FeatureMatrix | None = None,
               train_labels: LabelVector | None = None) -> ProbeResult:
    """Top-1 accuracy of argmax predictions, plus per-class breakdown."""
    if eval_features.d != classifier.weights.shape[1]:
        raise ShapeError(
            f"features have d={eval_features.d} but classifier expects "
            f"{classifier.weights.shape[1]}"
        )
    if eval_features.n != eval_labels.n:
        raise ShapeError("eval features and labels disagree on sample count")
    pred = classifier.predict(eval_features.data)
    correct = pred == eval_labels.labels
    top1 = float(correct.mean())
    C = eval_labels.num_classes
    per_class = np.zeros(C)
    counts = np.bincount(eval_labels.labels, minlength=C)
    hits = np.bincount(eval_labels.labels[correct], minlength=C)
    nonzero = counts > 0
    per_class[nonzero] = hits[nonzero] / counts[nonzero]
    train_top1 = float("nan")
    if train_features is not None and train_labels is not None:
        train_pred = classifier.predict(train_features.data)
        train_top1 = float((train_pred == train_labels.labels).mean())
    return ProbeResult(top1=top1, train_top1=train_top1,
                       num_eval=eval_labels.n, per_class=per_class)


class LinearProbe(BaseEstimator, ClassifierMixin):
    """Estimator wrapper: fit on frozen features, score by top-1."""

    def __init__(self, epochs=14, batch_size=256, lr0=0.01, momentum=0.9,
                 weight_decay=5e-4, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    def _config(self) -> ProbeConfig:
        return ProbeConfig(epochs=self.epochs, batch_size=self.batch_size,
                           lr0=self.lr0, momentum=self.momentum,
                           weight_decay=self.weight_decay, seed=self.seed)

    def fit(self, X, y):
        feats = X if isinstance(X, FeatureMatrix) else FeatureMatrix(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64)
        labels = LabelVector(y, num_classes=int(y.max()) + 1)
        self.classifier_ = probe_fit(feats, labels, self._config())
        return self

    def predict(self, X):
        X = X.data if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
        return self.classifier_.predict(X)
