"""Command-line entry points for the pipeline.

Every subcommand takes explicit seeds and file paths; all randomness
flows from them.  Exit status is 0 on success, 1 on failure with the
failing stage named on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness, kmeans, nnet, probe, relabel, store
from .errors import ClusterFitError, StageError


def _parse_values(text: str):
    return [float(v) if "." in v else v for v in text.split(",")]


def _parse_seeds(text: str) -> list[int]:
    """Accept '0..4' (inclusive) or '0,1,2'."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def _load_kmeans_config(args) -> kmeans.KMeansConfig:
    return kmeans.KMeansConfig(
        k=args.k, seed=args.seed, init=args.init,
        stage1_fraction=args.stage1_fraction,
        stage1_iters=args.stage1_iters, stage2_iters=args.stage2_iters,
    )


def _add_kmeans_args(p):
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", default="kpp", choices=["kpp", "random-points"])
    p.add_argument("--stage1-fraction", type=float, default=1.0)
    p.add_argument("--stage1-iters", type=int, default=30)
    p.add_argument("--stage2-iters", type=int, default=5)


def cmd_synth(args):
    spec = harness.SynthSpec(**json.loads(Path(args.spec).read_text())) if args.spec \
        else harness.SynthSpec(seed=args.seed)
    data = harness.synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.write_features(data.pretrain.features, out / "pretrain.cff")
    store.write_labels(data.pretrain.labels, out / "pretrain.cfl")
    store.write_features(data.clusterfit.features, out / "clusterfit.cff")
    store.write_labels(data.clusterfit.labels, out / "clusterfit.cfl")
    for name, ds in (("target_train", data.target_train), ("target_eval", data.target_eval)):
        store.write_features(ds.features, out / f"{name}.cff")
        store.write_labels(ds.labels, out / f"{name}.cfl")
        store.write_labels(data.coarse_labels(ds), out / f"{name}_coarse.cfl")
    meta = {"spec": asdict(spec), "nearest_center_top1": data.nearest_center_top1()}
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    print(f"wrote 4 splits to {out} (nearest-center reference top1 = "
          f"{meta['nearest_center_top1']:.4f})")


def cmd_cluster(args):
    feats = store.read_features(args.features)
    if args.l2_normalize:
        feats = store.l2_normalize(feats)
    cfg = _load_kmeans_config(args)
    centroids = kmeans.kmeans_fit(feats, cfg, n_threads=args.threads)
    kmeans.save_centroids(centroids, args.out, seed=args.seed)
    print(f"k={centroids.k} inertia={centroids.inertia:.6g} "
          f"iters={centroids.iterations_run} -> {args.out}")


def cmd_relabel(args):
    feats = store.read_features(args.features)
    if args.l2_normalize:
        feats = store.l2_normalize(feats)
    if args.strategy == "unsupervised":
        labels = relabel.pseudo_labels(feats, _load_kmeans_config(args), n_threads=args.threads)
    else:
        if not args.labels:
            raise ClusterFitError(f"--labels is required for strategy {args.strategy}")
        src = store.read_labels(args.labels)
        if args.strategy == "per-label":
            plan = relabel.per_label_plan(src, args.k)
            if args.plan_out:
                Path(args.plan_out).write_text(plan.to_json())
            labels = relabel.per_label_pseudo_labels(
                feats, src, plan, _load_kmeans_config(args), n_threads=args.threads)
        else:
            labels = relabel.prototype_labels(feats, src)
    store.write_labels(labels, args.out)
    print(f"{labels.num_classes} pseudo-classes over {labels.n} samples -> {args.out}")


def cmd_inject_noise(args):
    labels = store.read_labels(args.labels)
    noisy = relabel.inject_noise(labels, relabel.NoiseSpec(p=args.p, seed=args.seed))
    store.write_labels(noisy, args.out)
    flipped = (noisy.labels != labels.labels).mean()
    print(f"flipped {flipped:.4f} of {labels.n} labels -> {args.out}")


def cmd_fit(args):
    feats = store.read_features(args.inputs)
    label_vectors = [store.read_labels(p) for p in args.labels]
    train_raw = json.loads(Path(args.train).read_text())
    hidden = tuple(train_raw.pop("hidden", [64]))
    cfg = nnet.TrainConfig(**train_raw)
    widths = (feats.d, *hidden, *[lv.num_classes for lv in label_vectors])
    loss = "ce"
    if args.teacher:
        teacher = nnet.load_model(args.teacher)
        loss = nnet.DistillConfig(teacher=teacher, T=args.distill_T, alpha=args.distill_alpha)
    elif len(label_vectors) > 1:
        loss = "multitask"
    labels = label_vectors if len(label_vectors) > 1 else label_vectors[0]
    model, epoch_losses = nnet.train(widths, feats, labels, cfg, loss=loss,
                                     num_heads=len(label_vectors))
    nnet.save_model(model, args.out, seed=cfg.seed, epoch=cfg.epochs)
    print(f"final epoch loss {epoch_losses[-1]:.6f} -> {args.out}")


def cmd_probe(args):
    model = nnet.load_model(args.model)
    tr_f = nnet.extract_features(model, store.read_features(args.target_train))
    ev_f = nnet.extract_features(model, store.read_features(args.target_eval))
    tr_l = store.read_labels(args.target_train_labels)
    ev_l = store.read_labels(args.target_eval_labels)
    cfg = probe.ProbeConfig(epochs=args.epochs, lr0=args.lr0, seed=args.seed)
    clf = probe.probe_fit(tr_f, tr_l, cfg)
    result = probe.probe_eval(clf, ev_f, ev_l, tr_f, tr_l)
    print(json.dumps(result.to_dict(), indent=2))


def cmd_pipeline(args):
    cfg = harness.config_from_dict(json.loads(Path(args.config).read_text()))
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else (lambda msg: None)
    table = harness.clusterfit_run(cfg, log=log)
    out = args.out or cfg.output
    if out:
        table.write(out)
        print(f"{len(table.rows)} rows -> {out}")
    else:
        print(table.to_csv(), end="")


def cmd_sweep(args):
    cfg = harness.config_from_dict(json.loads(Path(args.config).read_text()))
    values = _parse_values(args.values)
    if args.axis in ("K", "m"):
        values = [int(v) for v in values]
    elif args.axis in ("p", "capacity"):
        values = [float(v) for v in values]
    seeds = _parse_seeds(args.seeds)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else (lambda msg: None)
    out = args.out or cfg.output
    table = harness.sweep(cfg, args.axis, values, seeds, out_path=out, log=log)
    if out:
        table.write(out)
        print(f"{len(table.rows)} rows -> {out}")
    else:
        print(table.to_csv(), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterfit",
                                     description="Cluster-and-refit representation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic splits as CFF1/CFL1 files")
    p.add_argument("--spec", help="JSON file with generator settings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", help="fit k-means centers on a feature file")
    p.add_argument("--features", required=True)
    _add_kmeans_args(p)
    p.add_argument("--l2-normalize", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("relabel", help="produce pseudo-labels from features")
    p.add_argument("--strategy", required=True,
                   choices=["unsupervised", "per-label", "prototype"])
    p.add_argument("--features", required=True)
    p.add_argument("--labels", help="source labels (per-label / prototype strategies)")
    _add_kmeans_args(p)
    p.add_argument("--l2-normalize", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--plan-out", help="write the per-class cluster plan as JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_relabel)

    p = sub.add_parser("inject-noise", help="uniformly corrupt a label file")
    p.add_argument("--labels", required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("fit", help="train a model on features and labels")
    p.add_argument("--inputs", required=True)
    p.add_argument("--labels", action="append", required=True,
                   help="label file; repeat for a multi-head model")
    p.add_argument("--train", required=True, help="JSON with hidden widths and optimizer settings")
    p.add_argument("--teacher", help="teacher checkpoint for distillation")
    p.add_argument("--distill-T", type=float, default=20.0)
    p.add_argument("--distill-alpha", type=float, default=0.75)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("probe", help="linear-probe a checkpoint on a target task")
    p.add_argument("--model", required=True)
    p.add_argument("--target-train", required=True)
    p.add_argument("--target-train-labels", required=True)
    p.add_argument("--target-eval", required=True)
    p.add_argument("--target-eval-labels", required=True)
    p.add_argument("--epochs", type=int, default=14)
    p.add_argument("--lr0", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("pipeline", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="run the pipeline over an axis x seeds grid")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=list(harness.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", required=True, help="'0..4' or '0,1,2'")
    p.add_argument("--out")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ClusterFitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
