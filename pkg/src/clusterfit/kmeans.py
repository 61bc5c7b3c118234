"""Two-stage Lloyd k-means with deterministic chunked accumulation.

The fit runs in two stages: a configurable number of iterations on a
random subsample of the rows, then a shorter refinement on the full set
starting from the stage-1 centers.  Per-cluster sums are accumulated
over fixed 4096-row chunks and the chunk partials reduced in chunk
order, so results are bit-identical regardless of how many worker
threads compute the chunks.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, InfeasibleError, ShapeError
from .store import Centroids, FeatureMatrix, read_features, write_features

CHUNK_ROWS = 4096


@dataclass(frozen=True)
class KMeansConfig:
    """Clustering hyper-parameters.

    ``stage1_fraction`` of the rows are clustered for ``stage1_iters``
    iterations, then ``stage2_iters`` refinement iterations run on all
    rows.  ``stage1_fraction=1.0`` with ``stage1_iters=0`` degenerates
    to plain Lloyd.
    """

    k: int
    init: str = "kpp"
    stage1_fraction: float = 1.0
    stage1_iters: int = 30
    stage2_iters: int = 5
    seed: int = 0
    tol: float = 1e-6
    empty_cluster_policy: str = "respawn-farthest"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.init not in ("kpp", "random-points"):
            raise ConfigError(f"unknown init {self.init!r}")
        if not (0.0 < self.stage1_fraction <= 1.0):
            raise ConfigError("stage1_fraction must be in (0, 1]")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.tol < 0:
            raise ConfigError("tol must be >= 0")
        if self.empty_cluster_policy != "respawn-farthest":
            raise ConfigError(f"unknown empty_cluster_policy {self.empty_cluster_policy!r}")


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Per-sample nearest-center index and squared distance."""

    assignments: np.ndarray
    distances: np.ndarray

    @property
    def n(self) -> int:
        return self.assignments.shape[0]


def _chunks(n: int):
    return [(s, min(s + CHUNK_ROWS, n)) for s in range(0, n, CHUNK_ROWS)]


def _assign_chunk(X, centers, c2, lo, hi):
    """Nearest center per row of X[lo:hi]; ties broken by lowest index."""
    block = X[lo:hi]
    cross = block @ centers.T
    d2 = (block * block).sum(axis=1)[:, None] - 2.0 * cross + c2[None, :]
    assign = np.argmin(d2, axis=1)
    # Recompute the winning distance directly: exact zero on exact matches
    # and better-conditioned than the expansion.
    diff = block - centers[assign]
    dist = (diff * diff).sum(axis=1)
    return assign, dist


def _partials_chunk(X, k, assign, lo, hi):
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, assign[lo:hi], X[lo:hi])
    counts = np.bincount(assign[lo:hi], minlength=k)
    return sums, counts


def _assign_all(X, centers, n_threads):
    c2 = (centers * centers).sum(axis=1)
    spans = _chunks(X.shape[0])
    if n_threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(lambda s: _assign_chunk(X, centers, c2, *s), spans))
    else:
        parts = [_assign_chunk(X, centers, c2, *s) for s in spans]
    assign = np.concatenate([p[0] for p in parts])
    dist = np.concatenate([p[1] for p in parts])
    return assign, dist


def _cluster_sums(X, k, assign, n_threads):
    """Per-cluster sums/counts, reduced over fixed chunks in chunk order."""
    spans = _chunks(X.shape[0])
    if n_threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(lambda s: _partials_chunk(X, k, assign, *s), spans))
    else:
        parts = [_partials_chunk(X, k, assign, *s) for s in spans]
    sums = np.zeros((k, X.shape[1]))
    counts = np.zeros(k, dtype=np.int64)
    for s, c in parts:
        sums += s
        counts += c
    return sums, counts


def _init_centers(X, k, init, rng):
    n = X.shape[0]
    if init == "random-points":
        idx = rng.choice(n, size=k, replace=False)
        return X[idx].copy()
    # k-means++
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining points coincide with a chosen center.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd_stage(X, centers, iters, tol, n_threads):
    """Run Lloyd iterations; returns (centers, inertia history, iters run)."""
    k = centers.shape[0]
    history = []
    prev = np.inf
    it = 0
    for it in range(1, iters + 1):
        assign, dist = _assign_all(X, centers, n_threads)
        inertia = float(dist.sum())
        history.append(inertia)
        sums, counts = _cluster_sums(X, k, assign, n_threads)
        empty = np.flatnonzero(counts == 0)
        nonempty = counts > 0
        centers = centers.copy()
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if empty.size:
            # Respawn each empty cluster at the point currently farthest
            # from its assigned center (lowest index on ties), excluding
            # points already consumed by an earlier respawn.
            order = np.argsort(-dist, kind="stable")
            used = 0
            for j in empty:
                centers[j] = X[order[used]]
                used += 1
        if prev < np.inf and not empty.size and (prev - inertia) <= tol * prev:
            break
        prev = inertia
    return centers, history, it


def kmeans_fit(features: FeatureMatrix, cfg: KMeansConfig, n_threads: int = 1) -> Centroids:
    """Fit k centers with the two-stage subsampled schedule.

    Final inertia is always measured on the full dataset.  Results are
    bit-identical for a fixed ``cfg.seed`` regardless of ``n_threads``.
    """
    X = features.data
    n = X.shape[0]
    if n < cfg.k:
        raise InfeasibleError(f"cannot fit k={cfg.k} clusters on {n} samples")
    if cfg.k > 1 and np.ptp(X, axis=0).max() == 0.0:
        warnings.warn("all points identical; duplicate centers will be respawned")
    rng = np.random.default_rng(cfg.seed)

    n_sub = max(cfg.k, int(round(cfg.stage1_fraction * n)))
    if n_sub < n:
        sub_idx = np.sort(rng.choice(n, size=n_sub, replace=False))
        X_sub = X[sub_idx]
    else:
        X_sub = X
    centers = _init_centers(X_sub, cfg.k, cfg.init, rng)

    centers, hist1, it1 = _lloyd_stage(X_sub, centers, cfg.stage1_iters, cfg.tol, n_threads)
    centers, hist2, it2 = _lloyd_stage(X, centers, cfg.stage2_iters, cfg.tol, n_threads)

    _, dist = _assign_all(X, centers, n_threads)
    inertia = float(dist.sum())
    result = Centroids(centers=centers, inertia=inertia, iterations_run=it1 + it2)
    object.__setattr__(result, "inertia_history", {"stage1": hist1, "stage2": hist2})
    return result


def kmeans_assign(features: FeatureMatrix, c: Centroids, n_threads: int = 1) -> ClusterAssignment:
    """Map each sample to its nearest center (squared Euclidean).

    Ties break toward the lowest center index.
    """
    if features.d != c.d:
        raise ShapeError(f"features have d={features.d} but centers have d={c.d}")
    assign, dist = _assign_all(features.data, c.centers, n_threads)
    return ClusterAssignment(assignments=assign, distances=np.maximum(dist, 0.0))


class TwoStageKMeans(BaseEstimator):
    """Estimator wrapper around :func:`kmeans_fit` / :func:`kmeans_assign`.

    After ``fit``: ``cluster_centers_``, ``inertia_``, ``n_iter_``,
    ``inertia_history_``, ``labels_``.
    """

    def __init__(self, k=8, init="kpp", stage1_fraction=1.0, stage1_iters=30,
                 stage2_iters=5, seed=0, tol=1e-6, n_threads=1):
        self.k = k
        self.init = init
        self.stage1_fraction = stage1_fraction
        self.stage1_iters = stage1_iters
        self.stage2_iters = stage2_iters
        self.seed = seed
        self.tol = tol
        self.n_threads = n_threads

    def _config(self) -> KMeansConfig:
        return KMeansConfig(
            k=self.k, init=self.init, stage1_fraction=self.stage1_fraction,
            stage1_iters=self.stage1_iters, stage2_iters=self.stage2_iters,
            seed=self.seed, tol=self.tol,
        )

    def fit(self, X, y=None):
        feats = X if isinstance(X, FeatureMatrix) else FeatureMatrix(np.asarray(X, dtype=np.float64))
        result = kmeans_fit(feats, self._config(), n_threads=self.n_threads)
        self.centroids_ = result
        self.cluster_centers_ = result.centers
        self.inertia_ = result.inertia
        self.n_iter_ = result.iterations_run
        self.inertia_history_ = result.inertia_history
        self.labels_ = kmeans_assign(feats, result, n_threads=self.n_threads).assignments
        return self

    def predict(self, X):
        feats = X if isinstance(X, FeatureMatrix) else FeatureMatrix(np.asarray(X, dtype=np.float64))
        return kmeans_assign(feats, self.centroids_, n_threads=self.n_threads).assignments


def save_centroids(c: Centroids, path, seed: int | None = None) -> None:
    """Persist centers as CFF1 plus a JSON sidecar with the metadata."""
    path = Path(path)
    write_features(FeatureMatrix(c.centers), path)
    sidecar = {"k": c.k, "inertia": c.inertia, "iterations_run": c.iterations_run, "seed": seed}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_centroids(path) -> Centroids:
    path = Path(path)
    centers = read_features(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return Centroids(centers=centers.data, inertia=meta["inertia"],
                     iterations_run=meta["iterations_run"])
