"""Pseudo-label generation: cluster assignments as labels, per-class
clustering, prototype alignment, and synthetic uniform label noise."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InfeasibleError, ShapeError
from .kmeans import KMeansConfig, kmeans_assign, kmeans_fit
from .store import FeatureMatrix, LabelVector


@dataclass(frozen=True)
class NoiseSpec:
    """Uniform label corruption: flip each label with probability p to a
    uniformly chosen *different* class."""

    p: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ValueError("flip probability must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class PerLabelPlan:
    """Per-class cluster counts k_l apportioned proportional to sqrt(n_l)."""

    cluster_counts: np.ndarray  # k_l per class
    sample_counts: np.ndarray  # n_l per class

    @property
    def total_k(self) -> int:
        return int(self.cluster_counts.sum())

    def to_json(self) -> str:
        plan = {
            str(c): {"n": int(n), "k": int(k)}
            for c, (n, k) in enumerate(zip(self.sample_counts, self.cluster_counts))
        }
        return json.dumps(plan, indent=2)


def pseudo_labels(features: FeatureMatrix, cfg: KMeansConfig, n_threads: int = 1) -> LabelVector:
    """Cluster the features and return the assignments as categorical labels."""
    centroids = kmeans_fit(features, cfg, n_threads=n_threads)
    assign = kmeans_assign(features, centroids, n_threads=n_threads)
    return LabelVector(assign.assignments, num_classes=cfg.k)


def inject_noise(labels: LabelVector, spec: NoiseSpec) -> LabelVector:
    """Flip each label with probability p, drawing the replacement
    uniformly from the other num_classes-1 classes (never the original).

    One seeded stream decides both the flip mask and the replacements,
    so results are reproducible independent of iteration order.
    """
    if spec.p > 0 and labels.num_classes < 2:
        raise InfeasibleError("cannot flip labels with fewer than 2 classes")
    rng = np.random.default_rng(spec.seed)
    flip = rng.random(labels.n) < spec.p
    # Draw an offset in [1, C-1] and add mod C: uniform over the other classes.
    offsets = rng.integers(1, labels.num_classes, size=labels.n) if labels.num_classes > 1 \
        else np.zeros(labels.n, dtype=np.int64)
    out = labels.labels.copy()
    out[flip] = (out[flip] + offsets[flip]) % labels.num_classes
    return LabelVector(out, num_classes=labels.num_classes)


def per_label_plan(labels: LabelVector, total_k: int) -> PerLabelPlan:
    """Apportion total_k clusters across classes proportional to sqrt(n_l).

    Largest-remainder apportionment, clamped to 1 <= k_l <= n_l for
    every non-empty class; empty classes get k_l = 0.
    """
    n_l = labels.class_counts()
    nonempty = n_l > 0
    num_nonempty = int(nonempty.sum())
    if total_k < num_nonempty:
        raise InfeasibleError(
            f"total_k={total_k} is below the number of non-empty classes ({num_nonempty})"
        )
    weights = np.sqrt(n_l.astype(np.float64))
    quota = total_k * weights / weights.sum()
    k_l = np.floor(quota).astype(np.int64)
    k_l = np.clip(k_l, 1, n_l)
    k_l[~nonempty] = 0
    # Distribute the remainder by descending fractional part (ties by
    # lowest class id via stable sort), respecting the n_l cap.
    remainder = quota - np.floor(quota)
    order = np.argsort(-remainder, kind="stable")
    deficit = total_k - int(k_l.sum())
    while deficit != 0:
        moved = False
        for c in order:
            if deficit == 0:
                break
            if deficit > 0 and nonempty[c] and k_l[c] < n_l[c]:
                k_l[c] += 1
                deficit -= 1
                moved = True
            elif deficit < 0 and k_l[c] > 1:
                k_l[c] -= 1
                deficit += 1
                moved = True
        if not moved:
            break  # every clamp binds; sum(k_l) is as close as feasible
    return PerLabelPlan(cluster_counts=k_l, sample_counts=n_l)


def per_label_pseudo_labels(features: FeatureMatrix, labels: LabelVector,
                            plan: PerLabelPlan, cfg: KMeansConfig,
                            n_threads: int = 1) -> LabelVector:
    """Cluster each class separately with k = k_l and merge the cluster ids.

    Global id of (class c, cluster j) is sum of k_l over classes below c,
    plus j.  Per-class k-means seeds derive from cfg.seed XOR class id.
    """
    if features.n != labels.n:
        raise ShapeError("features and labels disagree on sample count")
    if len(plan.cluster_counts) != labels.num_classes:
        raise ShapeError("plan covers a different number of classes than the labels")
    offsets = np.concatenate([[0], np.cumsum(plan.cluster_counts)[:-1]])
    out = np.empty(labels.n, dtype=np.int64)
    for c in range(labels.num_classes):
        rows = np.flatnonzero(labels.labels == c)
        k_c = int(plan.cluster_counts[c])
        if rows.size == 0:
            continue
        sub = FeatureMatrix(features.data[rows])
        sub_cfg = KMeansConfig(
            k=k_c, init=cfg.init, stage1_fraction=cfg.stage1_fraction,
            stage1_iters=cfg.stage1_iters, stage2_iters=cfg.stage2_iters,
            seed=cfg.seed ^ c, tol=cfg.tol,
        )
        sub_labels = pseudo_labels(sub, sub_cfg, n_threads=n_threads)
        out[rows] = offsets[c] + sub_labels.labels
    return LabelVector(out, num_classes=plan.total_k)


def prototype_labels(features: FeatureMatrix, labels: LabelVector) -> LabelVector:
    """One-step prototype alignment.

    Step 1: each class's prototype is the mean of its rows.  Step 2:
    every sample is relabeled to the nearest prototype (squared
    Euclidean, ties to the lowest class id).  Exactly one iteration;
    the label-space size never changes.
    """
    if features.n != labels.n:
        raise ShapeError("features and labels disagree on sample count")
    counts = labels.class_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DegenerateInputError(f"class {empty[0]} has no samples")
    sums = np.zeros((labels.num_classes, features.d))
    np.add.at(sums, labels.labels, features.data)
    prototypes = sums / counts[:, None]
    p2 = (prototypes * prototypes).sum(axis=1)
    d2 = (features.data * features.data).sum(axis=1)[:, None] \
        - 2.0 * features.data @ prototypes.T + p2[None, :]
    return LabelVector(np.argmin(d2, axis=1), num_classes=labels.num_classes)
