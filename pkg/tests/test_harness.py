import numpy as np
import pytest

from clusterfit import (
    ExperimentConfig,
    KMeansConfig,
    NoiseSpec,
    StageError,
    SynthSpec,
    TrainConfig,
    clusterfit_run,
    sweep,
    synth_generate,
)
from clusterfit.harness import (
    RESULT_COLUMNS,
    BaselineSpec,
    ClusterfitSpec,
    PretrainSpec,
    ProbeSpec,
    ResultsTable,
    _restrict_to_top_m,
    config_from_dict,
)
from clusterfit.probe import ProbeConfig

TINY = SynthSpec(num_coarse=4, fines_per_coarse=2, d_input=8,
                 noise_scale=1.0, inter_coarse_sep=6.0, intra_coarse_sep=2.0,
                 n_pretrain=600, n_clusterfit=600, n_target_train=400,
                 n_target_eval=200, seed=0)


def tiny_config(**overrides):
    defaults = dict(
        data=TINY,
        pretrain=PretrainSpec(hidden=(16,), train=TrainConfig(epochs=3, lr0=0.2, seed=0)),
        clusterfit=ClusterfitSpec(
            kmeans=KMeansConfig(k=16, stage1_fraction=0.5, stage1_iters=10,
                                stage2_iters=3, seed=0),
            hidden=(16,), train=TrainConfig(epochs=3, lr0=0.2, seed=0)),
        probe=ProbeSpec(probe=ProbeConfig(epochs=4, lr0=0.1, seed=0)),
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


class TestSynth:
    def test_determinism(self):
        a = synth_generate(TINY)
        b = synth_generate(TINY)
        np.testing.assert_array_equal(a.pretrain.features.data, b.pretrain.features.data)
        np.testing.assert_array_equal(a.target_eval.labels.labels, b.target_eval.labels.labels)

    def test_splits_disjoint(self):
        data = synth_generate(TINY)
        assert not np.array_equal(data.pretrain.features.data[:10],
                                  data.target_train.features.data[:10])
        assert not np.array_equal(data.target_train.features.data[:10],
                                  data.target_eval.features.data[:10])

    def test_aliasing(self):
        data = synth_generate(TINY)
        assert data.clusterfit.features is data.pretrain.features
        spec = SynthSpec(**{**TINY.__dict__, "alias_clusterfit": False})
        distinct = synth_generate(spec)
        assert distinct.clusterfit.features is not distinct.pretrain.features

    def test_zero_noise_nearest_center_is_perfect(self):
        spec = SynthSpec(**{**TINY.__dict__, "noise_scale": 0.0})
        data = synth_generate(spec)
        assert data.nearest_center_top1() == 1.0

    def test_label_marginals_within_multinomial_bounds(self):
        spec = SynthSpec(**{**TINY.__dict__, "n_pretrain": 20000})
        data = synth_generate(spec)
        counts = data.pretrain.labels.class_counts()  # oracle: direct count
        n, C = 20000, spec.num_coarse
        expected = n / C
        sigma = np.sqrt(n * (1 / C) * (1 - 1 / C))
        assert (np.abs(counts - expected) < 4 * sigma).all()

    def test_coarse_labels_derive_from_fine(self):
        data = synth_generate(TINY)
        coarse = data.coarse_labels(data.target_eval)
        assert coarse.num_classes == TINY.num_coarse
        np.testing.assert_array_equal(
            coarse.labels, data.target_eval.labels.labels // TINY.fines_per_coarse)


class TestClusterfitRun:
    def test_row_schema_and_methods(self):
        table = clusterfit_run(tiny_config(baselines=BaselineSpec(npre2x=True)))
        methods = {r["method"] for r in table.rows}
        assert methods == {"npre", "cf", "npre2x"}
        targets = {r["target"] for r in table.rows}
        assert targets == {"fine", "coarse"}
        for row in table.rows:
            assert set(RESULT_COLUMNS) <= set(row)
            assert 0.0 <= float(row["top1"]) <= 1.0

    def test_csv_column_order(self):
        table = clusterfit_run(tiny_config())
        header = table.to_csv().splitlines()[0]
        assert header == "method,K,p,m,capacity,seed,target,top1,wallclock_s"

    def test_cluster_relabel_of_clean_classes_matches_source(self):
        # K = coarse count, tiny noise, perfect source model: clusters
        # reproduce classes so the refit model probes on par
        spec = SynthSpec(num_coarse=4, fines_per_coarse=1, d_input=8,
                         noise_scale=0.2, inter_coarse_sep=8.0, intra_coarse_sep=1.0,
                         n_pretrain=800, n_clusterfit=800, n_target_train=400,
                         n_target_eval=200, seed=1)
        cfg = tiny_config(
            data=spec,
            clusterfit=ClusterfitSpec(
                kmeans=KMeansConfig(k=4, stage1_fraction=1.0, stage1_iters=20,
                                    stage2_iters=5, seed=0),
                hidden=(16,), train=TrainConfig(epochs=3, lr0=0.2, seed=0)))
        table = clusterfit_run(cfg)
        npre = table.mean_top1("npre", "fine")
        cf = table.mean_top1("cf", "fine")
        assert abs(cf - npre) < 0.05

    def test_strategy_rows_carry_method_suffix(self):
        cfg = tiny_config(clusterfit=ClusterfitSpec(
            kmeans=KMeansConfig(k=8, stage1_fraction=0.5, stage1_iters=5,
                                stage2_iters=2, seed=0),
            strategy="prototype", hidden=(16,),
            train=TrainConfig(epochs=2, lr0=0.2, seed=0)))
        table = clusterfit_run(cfg)
        assert any(r["method"] == "cf-prototype" for r in table.rows)

    def test_epoch_parity_overrides_refit_config(self):
        # refit epochs follow the source epochs regardless of what the
        # clusterfit train config says
        a = tiny_config(clusterfit=ClusterfitSpec(
            kmeans=KMeansConfig(k=8, seed=0), hidden=(16,),
            train=TrainConfig(epochs=1, lr0=0.2, seed=0)))
        b = tiny_config(clusterfit=ClusterfitSpec(
            kmeans=KMeansConfig(k=8, seed=0), hidden=(16,),
            train=TrainConfig(epochs=3, lr0=0.2, seed=0)))
        ta, tb = clusterfit_run(a), clusterfit_run(b)
        for ra, rb in zip(ta.rows, tb.rows):
            assert ra["top1"] == rb["top1"]

    def test_stage_error_names_stage(self, tmp_path):
        from clusterfit.harness import FileData
        cfg = tiny_config(data=FileData(
            pretrain_features=str(tmp_path / "missing.cff"),
            pretrain_labels="x", target_train_features="x", target_train_labels="x",
            target_eval_features="x", target_eval_labels="x"))
        with pytest.raises(StageError) as err:
            clusterfit_run(cfg)
        assert err.value.stage == "materialize"


class TestSweep:
    def test_degenerate_sweep_equals_single_run(self):
        cfg = tiny_config()
        single = clusterfit_run(cfg)
        swept = sweep(cfg, "K", [16], [0])
        assert [r["top1"] for r in swept.rows] == [r["top1"] for r in single.rows]

    def test_cache_reuse_is_sound(self):
        cfg = tiny_config()
        cache = {}
        first = clusterfit_run(cfg, cache=cache)
        assert len(cache) == 1
        again = clusterfit_run(cfg, cache=cache)  # fully served from cache
        assert [r["top1"] for r in again.rows] == [r["top1"] for r in first.rows]
        fresh = clusterfit_run(cfg, cache=None)
        assert [r["top1"] for r in fresh.rows] == [r["top1"] for r in first.rows]

    def test_rows_complete_over_grid(self):
        cfg = tiny_config()
        table = sweep(cfg, "K", [8, 16], [0, 1])
        combos = {(r["method"], str(r["K"]), str(r["seed"]), r["target"])
                  for r in table.rows}
        assert len(combos) == len(table.rows)  # each combo exactly once
        assert len(table.rows) == 2 * 2 * 2 * 2  # methods x K x seeds x targets

    def test_partial_flush(self, tmp_path):
        out = tmp_path / "results.csv"
        sweep(tiny_config(), "K", [8], [0], out_path=out)
        text = out.read_text()
        assert text.startswith("method,")
        assert "cf" in text

    def test_noise_axis(self):
        table = sweep(tiny_config(), "p", [0.0, 0.5], [0])
        ps = {str(r["p"]) for r in table.rows}
        assert ps == {"0.0", "0.5"}


class TestRestrictTopM:
    def test_restriction_and_remap(self):
        rng = np.random.default_rng(0)
        from clusterfit import FeatureMatrix, LabelVector
        labels = LabelVector(np.array([0] * 50 + [1] * 30 + [2] * 20), 3)
        feats = FeatureMatrix(rng.normal(size=(100, 4)))
        f2, l2, keep = _restrict_to_top_m(feats, labels, 2, None, seed=0)
        assert l2.num_classes == 2
        assert f2.n == 80  # classes 0 and 1 survive
        assert set(l2.labels.tolist()) == {0, 1}

    def test_budget_subsamples(self):
        rng = np.random.default_rng(1)
        from clusterfit import FeatureMatrix, LabelVector
        labels = LabelVector(rng.integers(0, 4, 200), 4)
        feats = FeatureMatrix(rng.normal(size=(200, 4)))
        f2, l2, keep = _restrict_to_top_m(feats, labels, 4, 100, seed=0)
        assert f2.n == 100


def test_config_round_trip_through_json():
    import json
    cfg = tiny_config(baselines=BaselineSpec(distill=True, distill_T=10.0))
    back = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.clusterfit.kmeans.k == cfg.clusterfit.kmeans.k
    assert back.baselines.distill_T == 10.0
    assert back.pretrain.train.epochs == cfg.pretrain.train.epochs
    assert isinstance(back.data, SynthSpec) and back.data.n_pretrain == TINY.n_pretrain


def test_results_table_mean_filter():
    table = ResultsTable()
    table.add(method="cf", K=8, p=0.5, m=4, capacity=1.0, seed=0, target="fine", top1=0.5)
    table.add(method="cf", K=8, p=0.5, m=4, capacity=1.0, seed=1, target="fine", top1=0.7)
    assert table.mean_top1("cf", "fine", K=8) == pytest.approx(0.6)
