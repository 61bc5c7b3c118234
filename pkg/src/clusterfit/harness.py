"""Experiment orchestration: synthetic data, the full cluster-refit
pipeline, baselines, and sweeps over K / noise / label count / capacity.

Synthetic data is a hierarchical Gaussian mixture: coarse class centers,
fine sub-class centers offset inside each coarse class, and isotropic
sample noise.  The source model trains on coarse labels; transfer
quality is probed on the finer label space, so a representation that
collapses fine structure scores worse.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, StageError
from .kmeans import KMeansConfig
from .nnet import DistillConfig, TrainConfig, extract_features, train
from .probe import ProbeConfig, probe_eval, probe_fit
from .relabel import (
    NoiseSpec,
    inject_noise,
    per_label_plan,
    per_label_pseudo_labels,
    prototype_labels,
    pseudo_labels,
)
from .store import Dataset, FeatureMatrix, LabelVector, l2_normalize, read_features, read_labels

RESULT_COLUMNS = ["method", "K", "p", "m", "capacity", "seed", "target", "top1", "wallclock_s"]
STRATEGIES = ("unsupervised", "per-label", "prototype")


@dataclass(frozen=True)
class SynthSpec:
    """Hierarchical Gaussian mixture generator settings."""

    num_coarse: int = 20
    fines_per_coarse: int = 5
    d_input: int = 32
    noise_scale: float = 4.0
    inter_coarse_sep: float = 6.0
    intra_coarse_sep: float = 2.0
    n_pretrain: int = 20000
    n_clusterfit: int = 20000
    n_target_train: int = 10000
    n_target_eval: int = 5000
    alias_clusterfit: bool = True  # reuse the pretrain split as the clustering pool
    seed: int = 0

    def __post_init__(self):
        if min(self.num_coarse, self.fines_per_coarse, self.d_input) < 1:
            raise ConfigError("counts must be >= 1")
        if min(self.n_pretrain, self.n_clusterfit, self.n_target_train, self.n_target_eval) < 1:
            raise ConfigError("split sizes must be >= 1")
        if self.inter_coarse_sep <= 0 or self.intra_coarse_sep <= 0:
            raise ConfigError("separations must be > 0")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")

    @property
    def num_fine(self) -> int:
        return self.num_coarse * self.fines_per_coarse


@dataclass(frozen=True, eq=False)
class SynthData:
    """The four generated splits plus the true mixture centers."""

    pretrain: Dataset          # coarse labels
    clusterfit: Dataset        # coarse labels
    target_train: Dataset      # fine labels
    target_eval: Dataset       # fine labels
    fine_centers: np.ndarray
    spec: SynthSpec

    def coarse_labels(self, ds: Dataset) -> LabelVector:
        fpc = self.spec.fines_per_coarse
        return LabelVector(ds.labels.labels // fpc, num_classes=self.spec.num_coarse)

    def nearest_center_top1(self) -> float:
        """Reference accuracy of nearest-true-fine-center assignment on eval."""
        X = self.target_eval.features.data
        d2 = ((X[:, None, :] - self.fine_centers[None, :, :]) ** 2).sum(axis=2) \
            if X.shape[0] * self.fine_centers.shape[0] * X.shape[1] < 5e7 else None
        if d2 is None:
            x2 = (X * X).sum(axis=1)[:, None]
            c2 = (self.fine_centers * self.fine_centers).sum(axis=1)[None, :]
            d2 = x2 - 2.0 * X @ self.fine_centers.T + c2
        pred = np.argmin(d2, axis=1)
        return float((pred == self.target_eval.labels.labels).mean())


def synth_generate(spec: SynthSpec) -> SynthData:
    """Draw all four splits; each split uses its own substream so they
    are disjoint by construction and individually reproducible."""
    root = np.random.SeedSequence(spec.seed)
    center_ss, *split_ss = root.spawn(5)
    rng = np.random.default_rng(center_ss)
    coarse_centers = rng.normal(0.0, spec.inter_coarse_sep, size=(spec.num_coarse, spec.d_input))
    offsets = rng.normal(0.0, spec.intra_coarse_sep,
                         size=(spec.num_coarse, spec.fines_per_coarse, spec.d_input))
    fine_centers = (coarse_centers[:, None, :] + offsets).reshape(spec.num_fine, spec.d_input)

    def draw(ss, n, role, fine_labels):
        r = np.random.default_rng(ss)
        fine = r.integers(0, spec.num_fine, size=n)
        X = fine_centers[fine] + r.normal(0.0, spec.noise_scale, size=(n, spec.d_input))
        if fine_labels:
            labels = LabelVector(fine, num_classes=spec.num_fine)
        else:
            labels = LabelVector(fine // spec.fines_per_coarse, num_classes=spec.num_coarse)
        return Dataset(FeatureMatrix(X), labels, role=role), fine

    pre, _ = draw(split_ss[0], spec.n_pretrain, "pretrain", fine_labels=False)
    if spec.alias_clusterfit:
        cf = Dataset(pre.features, pre.labels, role="clusterfit")
    else:
        cf, _ = draw(split_ss[1], spec.n_clusterfit, "clusterfit", fine_labels=False)
    # Keep fine ids on the target splits; coarse ids derive by integer division.
    tr_ds, tr_fine = draw(split_ss[2], spec.n_target_train, "target", fine_labels=True)
    ev_ds, ev_fine = draw(split_ss[3], spec.n_target_eval, "target", fine_labels=True)
    return SynthData(pretrain=pre, clusterfit=cf, target_train=tr_ds, target_eval=ev_ds,
                     fine_centers=fine_centers, spec=spec)


@dataclass(frozen=True)
class FileData:
    """Pre-extracted features and labels on disk (CFF1/CFL1)."""

    pretrain_features: str
    pretrain_labels: str
    target_train_features: str
    target_train_labels: str
    target_eval_features: str
    target_eval_labels: str
    clusterfit_features: str | None = None  # defaults to aliasing the pretrain file


@dataclass(frozen=True)
class PretrainSpec:
    hidden: tuple[int, ...] = (64,)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr0=0.1))
    noise: NoiseSpec | None = None


@dataclass(frozen=True)
class ClusterfitSpec:
    kmeans: KMeansConfig = field(default_factory=lambda: KMeansConfig(
        k=400, stage1_fraction=0.2, stage1_iters=30, stage2_iters=5))
    strategy: str = "unsupervised"
    hidden: tuple[int, ...] = (64,)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr0=0.1))

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")


@dataclass(frozen=True)
class BaselineSpec:
    npre2x: bool = False
    distill: bool = False
    distill_T: float = 20.0
    distill_alpha: float = 0.75
    prototype: bool = False


@dataclass(frozen=True)
class ProbeSpec:
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    lr_grid: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    data: SynthSpec | FileData = field(default_factory=SynthSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    clusterfit: ClusterfitSpec = field(default_factory=ClusterfitSpec)
    baselines: BaselineSpec = field(default_factory=BaselineSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    m_restrict: int | None = None  # keep only the top-m most frequent source labels
    m_budget: int | None = None    # sample budget after the m restriction
    capacity: float = 1.0          # hidden-width multiplier for the refit model
    output: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = {"synth": asdict(self.data)} if isinstance(self.data, SynthSpec) \
            else {"files": asdict(self.data)}
        return d


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed JSON."""
    kwargs = {}
    data = raw.get("data", {})
    if "files" in data:
        kwargs["data"] = FileData(**data["files"])
    else:
        kwargs["data"] = SynthSpec(**data.get("synth", {}))
    pre = dict(raw.get("pretrain", {}))
    if "train" in pre:
        pre["train"] = TrainConfig(**pre["train"])
    if pre.get("noise") is not None:
        pre["noise"] = NoiseSpec(**pre["noise"])
    if "hidden" in pre:
        pre["hidden"] = tuple(pre["hidden"])
    kwargs["pretrain"] = PretrainSpec(**pre)
    cf = dict(raw.get("clusterfit", {}))
    if "kmeans" in cf:
        cf["kmeans"] = KMeansConfig(**cf["kmeans"])
    if "train" in cf:
        cf["train"] = TrainConfig(**cf["train"])
    if "hidden" in cf:
        cf["hidden"] = tuple(cf["hidden"])
    kwargs["clusterfit"] = ClusterfitSpec(**cf)
    kwargs["baselines"] = BaselineSpec(**raw.get("baselines", {}))
    pr = dict(raw.get("probe", {}))
    if "probe" in pr:
        pr["probe"] = ProbeConfig(**pr["probe"])
    if pr.get("lr_grid") is not None:
        pr["lr_grid"] = tuple(pr["lr_grid"])
    kwargs["probe"] = ProbeSpec(**pr)
    for key in ("m_restrict", "m_budget", "capacity", "output"):
        if key in raw:
            kwargs[key] = raw[key]
    return ExperimentConfig(**kwargs)


class ResultsTable:
    """Accumulates result rows and writes them as a fixed-column CSV."""

    def __init__(self, config: dict | None = None):
        self.rows: list[dict] = []
        self.config = config

    def add(self, **row):
        for col in RESULT_COLUMNS:
            row.setdefault(col, "")
        self.rows.append(row)

    def extend(self, other: "ResultsTable"):
        self.rows.extend(other.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())

    def mean_top1(self, method: str, target: str, **filters) -> float:
        vals = [float(r["top1"]) for r in self.rows
                if r["method"] == method and r["target"] == target
                and all(str(r[k]) == str(v) for k, v in filters.items())]
        if not vals:
            raise KeyError(f"no rows for method={method} target={target} {filters}")
        return float(np.mean(vals))


def _unit_rows(m: FeatureMatrix) -> FeatureMatrix:
    """Row-normalize for clustering, tolerating dead-ReLU zero rows.

    Zero rows stay zero (they form their own tight cluster) so the
    strict l2_normalize contract, which rejects them, is not used here.
    """
    norms = np.linalg.norm(m.data, axis=1)
    if (norms > 0).all():
        return l2_normalize(m)
    safe = np.where(norms > 0, norms, 1.0)
    return FeatureMatrix(m.data / safe[:, None])


@dataclass(eq=False)
class _Splits:
    """Materialized data for one run."""

    pretrain_features: FeatureMatrix
    pretrain_labels: LabelVector
    cf_features: FeatureMatrix
    cf_labels: LabelVector | None
    targets: dict  # name -> (train_features, train_labels, eval_features, eval_labels)


def _materialize(cfg: ExperimentConfig) -> _Splits:
    if isinstance(cfg.data, SynthSpec):
        data = synth_generate(cfg.data)
        tt, te = data.target_train, data.target_eval
        targets = {
            "fine": (tt.features, tt.labels, te.features, te.labels),
            "coarse": (tt.features, data.coarse_labels(tt), te.features, data.coarse_labels(te)),
        }
        return _Splits(data.pretrain.features, data.pretrain.labels,
                       data.clusterfit.features, data.clusterfit.labels, targets)
    fd = cfg.data
    pre_f = read_features(fd.pretrain_features)
    pre_l = read_labels(fd.pretrain_labels)
    if fd.clusterfit_features is None or fd.clusterfit_features == fd.pretrain_features:
        cf_f, cf_l = pre_f, pre_l
    else:
        cf_f, cf_l = read_features(fd.clusterfit_features), None
    targets = {"target": (
        read_features(fd.target_train_features), read_labels(fd.target_train_labels),
        read_features(fd.target_eval_features), read_labels(fd.target_eval_labels),
    )}
    return _Splits(pre_f, pre_l, cf_f, cf_l, targets)


def _restrict_to_top_m(features: FeatureMatrix, labels: LabelVector,
                       m: int, budget: int | None, seed: int):
    """Keep samples of the m most frequent labels, remapped to [0, m)."""
    counts = labels.class_counts()
    top = np.sort(np.argsort(-counts, kind="stable")[:m])
    remap = -np.ones(labels.num_classes, dtype=np.int64)
    remap[top] = np.arange(m)
    keep = np.flatnonzero(remap[labels.labels] >= 0)
    if budget is not None and keep.size > budget:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x33]))
        keep = np.sort(rng.choice(keep, size=budget, replace=False))
    return (FeatureMatrix(features.data[keep]),
            LabelVector(remap[labels.labels[keep]], num_classes=m), keep)


def _scaled_hidden(hidden: tuple[int, ...], capacity: float) -> tuple[int, ...]:
    return tuple(max(1, int(round(w * capacity))) for w in hidden)


def _probe_best(target, probe_spec: ProbeSpec, model):
    """Probe one model on one target; with a grid, report the best lr."""
    tr_f, tr_l, ev_f, ev_l = target
    tr_feats = extract_features(model, tr_f)
    ev_feats = extract_features(model, ev_f)
    lrs = probe_spec.lr_grid or (probe_spec.probe.lr0,)
    best = None
    for lr in lrs:
        pc = replace(probe_spec.probe, lr0=lr)
        clf = probe_fit(tr_feats, tr_l, pc)
        result = probe_eval(clf, ev_feats, ev_l, tr_feats, tr_l)
        if best is None or result.top1 > best.top1:
            best = result
    return best


def _cache_key(cfg: ExperimentConfig) -> str:
    """Everything the source-model stage depends on."""
    relevant = {
        "data": cfg.to_dict()["data"],
        "pretrain": asdict(cfg.pretrain),
        "m_restrict": cfg.m_restrict,
        "m_budget": cfg.m_budget,
    }
    return json.dumps(relevant, sort_keys=True)


def clusterfit_run(cfg: ExperimentConfig, cache: dict | None = None,
                   log=lambda msg: None) -> ResultsTable:
    """Execute the full pipeline and return one results row per
    (method, target).

    Stages: train the source model, extract clustering-pool features,
    re-label, refit from scratch on the pseudo-labels for the same
    epoch budget, probe everything.  Any stage failure raises
    StageError naming the stage.
    """
    table = ResultsTable(config=cfg.to_dict())
    stage = "materialize"
    try:
        splits = _materialize(cfg)
        noise_p = cfg.pretrain.noise.p if cfg.pretrain.noise else 0.0
        K = cfg.clusterfit.kmeans.k
        m_val = cfg.m_restrict if cfg.m_restrict is not None else splits.pretrain_labels.num_classes
        base_row = {"p": noise_p, "m": m_val, "capacity": cfg.capacity,
                    "seed": cfg.pretrain.train.seed}

        def probe_method(method, model, K_value, elapsed):
            t0 = time.perf_counter()
            for name, target in splits.targets.items():
                result = _probe_best(target, cfg.probe, model)
                table.add(method=method, K=K_value, target=name, top1=result.top1,
                          wallclock_s=round(elapsed + time.perf_counter() - t0, 3),
                          **base_row)

        stage = "pretrain"
        key = _cache_key(cfg)
        cached = cache.get(key) if cache is not None else None
        if cached is None:
            pre_f, pre_l = splits.pretrain_features, splits.pretrain_labels
            if cfg.m_restrict is not None:
                pre_f, pre_l, _ = _restrict_to_top_m(
                    pre_f, pre_l, cfg.m_restrict, cfg.m_budget, cfg.pretrain.train.seed)
            train_labels = pre_l
            if cfg.pretrain.noise is not None and cfg.pretrain.noise.p > 0:
                train_labels = inject_noise(pre_l, cfg.pretrain.noise)
            t0 = time.perf_counter()
            widths = (pre_f.d, *cfg.pretrain.hidden, train_labels.num_classes)
            npre, _ = train(widths, pre_f, train_labels, cfg.pretrain.train)
            npre_time = time.perf_counter() - t0
            stage = "extract"
            cf_raw = extract_features(npre, splits.cf_features)
            cf_embed = _unit_rows(cf_raw)
            cached = {"npre": npre, "npre_time": npre_time,
                      "cf_embed": cf_embed, "train_labels": train_labels,
                      "pre_f": pre_f, "pre_l": pre_l}
            if cache is not None:
                cache[key] = cached
        npre = cached["npre"]
        cf_embed = cached["cf_embed"]
        noisy_labels = cached["train_labels"]
        pre_f, pre_l = cached["pre_f"], cached["pre_l"]
        log(f"source model trained ({cached['npre_time']:.1f}s)")

        stage = "probe-npre"
        # Non-refit methods are stamped with the run's configured K so a
        # K sweep yields exactly one row per (method, K, seed, target).
        probe_method("npre", npre, K, cached["npre_time"])

        stage = "relabel"
        t0 = time.perf_counter()
        strategy = cfg.clusterfit.strategy
        # Label-using strategies see whatever supervision the clustering
        # pool actually has: the (possibly noisy) training labels when
        # the pool aliases the pre-training split, clean pool labels
        # otherwise.
        if noisy_labels.n == cf_embed.n and splits.cf_features is splits.pretrain_features:
            pool_labels = noisy_labels
        else:
            pool_labels = splits.cf_labels
        if strategy == "unsupervised":
            new_labels = pseudo_labels(cf_embed, cfg.clusterfit.kmeans)
        elif strategy == "per-label":
            plan = per_label_plan(pool_labels, K)
            new_labels = per_label_pseudo_labels(cf_embed, pool_labels, plan, cfg.clusterfit.kmeans)
        else:  # prototype
            new_labels = prototype_labels(cf_embed, pool_labels)
        relabel_time = time.perf_counter() - t0
        log(f"relabel[{strategy}] -> {new_labels.num_classes} classes ({relabel_time:.1f}s)")

        stage = "refit"
        t0 = time.perf_counter()
        cf_train = replace(cfg.clusterfit.train, epochs=cfg.pretrain.train.epochs,
                           seed=cfg.pretrain.train.seed)
        cf_hidden = _scaled_hidden(cfg.clusterfit.hidden, cfg.capacity)
        cf_widths = (splits.cf_features.d, *cf_hidden, new_labels.num_classes)
        ncf, _ = train(cf_widths, splits.cf_features, new_labels, cf_train)
        ncf_time = time.perf_counter() - t0

        stage = "probe-ncf"
        cf_method = "cf" if strategy == "unsupervised" else f"cf-{strategy}"
        probe_method(cf_method, ncf, new_labels.num_classes, relabel_time + ncf_time)

        if cfg.baselines.npre2x:
            stage = "npre2x"
            t0 = time.perf_counter()
            cfg2x = replace(cfg.pretrain.train, epochs=2 * cfg.pretrain.train.epochs)
            widths = (pre_f.d, *cfg.pretrain.hidden, noisy_labels.num_classes)
            npre2x, _ = train(widths, pre_f, noisy_labels, cfg2x)
            probe_method("npre2x", npre2x, K, time.perf_counter() - t0)

        if cfg.baselines.distill:
            stage = "distill"
            t0 = time.perf_counter()
            dcfg = DistillConfig(teacher=npre, T=cfg.baselines.distill_T,
                                 alpha=cfg.baselines.distill_alpha)
            widths = (pre_f.d, *cfg.pretrain.hidden, noisy_labels.num_classes)
            student, _ = train(widths, pre_f, noisy_labels, cfg.pretrain.train, loss=dcfg)
            probe_method("distill", student, K, time.perf_counter() - t0)

        if cfg.baselines.prototype:
            stage = "prototype"
            t0 = time.perf_counter()
            proto = prototype_labels(cf_embed, pool_labels)
            widths = (splits.cf_features.d, *cf_hidden, proto.num_classes)
            nproto, _ = train(widths, splits.cf_features, proto, cf_train)
            probe_method("prototype", nproto, proto.num_classes, time.perf_counter() - t0)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc
    return table


SWEEP_AXES = ("K", "p", "m", "capacity", "strategy")


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "K":
        return replace(cfg, clusterfit=replace(
            cfg.clusterfit, kmeans=replace(cfg.clusterfit.kmeans, k=int(value))))
    if axis == "p":
        base = cfg.pretrain.noise or NoiseSpec(p=0.0, seed=cfg.pretrain.train.seed)
        return replace(cfg, pretrain=replace(cfg.pretrain, noise=replace(base, p=float(value))))
    if axis == "m":
        return replace(cfg, m_restrict=int(value))
    if axis == "capacity":
        return replace(cfg, capacity=float(value))
    if axis == "strategy":
        return replace(cfg, clusterfit=replace(cfg.clusterfit, strategy=str(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")


def _apply_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    data = replace(cfg.data, seed=seed) if isinstance(cfg.data, SynthSpec) else cfg.data
    noise = replace(cfg.pretrain.noise, seed=seed) if cfg.pretrain.noise else None
    return replace(
        cfg,
        data=data,
        pretrain=replace(cfg.pretrain, train=replace(cfg.pretrain.train, seed=seed),
                         noise=noise),
        clusterfit=replace(cfg.clusterfit,
                           kmeans=replace(cfg.clusterfit.kmeans, seed=seed),
                           train=replace(cfg.clusterfit.train, seed=seed)),
        probe=replace(cfg.probe, probe=replace(cfg.probe.probe, seed=seed)),
    )


def sweep(cfg: ExperimentConfig, axis: str, values, seeds,
          out_path=None, log=lambda msg: None) -> ResultsTable:
    """Run the pipeline for every (axis value, seed) pair.

    The trained source model and its extracted features are cached and
    reused across axis values that do not change the source stage (for
    example across K at a fixed noise level).
    """
    table = ResultsTable(config={"base": cfg.to_dict(), "axis": axis,
                                 "values": list(values), "seeds": list(seeds)})
    for seed in seeds:
        cache: dict = {}
        for value in values:
            run_cfg = _apply_seed(_apply_axis(cfg, axis, value), seed)
            log(f"axis {axis}={value} seed={seed}")
            rows = clusterfit_run(run_cfg, cache=cache, log=log)
            table.extend(rows)
            if out_path is not None:
                table.write(out_path)  # flush partial results as we go
    return table
