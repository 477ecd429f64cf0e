"""Training orchestration: weights, metrics, epoch loop, sweeps, alignment."""

import math
import warnings

import numpy as np
import pytest

from irrimap import harness, synth
from irrimap.classifiers import ClassifierSpec
from irrimap.harness import (ConfusionCounts, TrainingRunConfig,
                             build_region_datasets, compute_weights, evaluate,
                             f1_score, metrics_from_predictions,
                             prediction_alignment, region_sweep, resplit_table,
                             train_network_loop, train_tree_models)
from irrimap.raster_io import concat_tables


def region_table(name, n_per_class=60, phase=0, seed=0, id_start=1, noise=0.03):
    spec = synth.RegionSpec(name, counts={"non_irrigated": n_per_class,
                                          "irrigated": n_per_class},
                            phase_offset=phase, noise_std=noise,
                            pixels_per_polygon=4)
    table, _ = synth.generate_region(spec, seed=seed, id_start=id_start)
    return table


def multi_region_table(names, n_per_class=60, seed=0, noise=0.03, phases=None):
    tables = []
    for i, name in enumerate(names):
        phase = 0 if phases is None else phases[i]
        tables.append(region_table(name, n_per_class, phase, seed + i,
                                   id_start=1 + 10_000 * i, noise=noise))
    return concat_tables(tables)


class TestComputeWeights:
    def test_class_weights_by_hand(self):
        y = np.r_[np.zeros(75), np.ones(25)]
        weights = compute_weights({"r": y})
        assert weights["r"][0] == pytest.approx(100 / (2 * 75))
        assert weights["r"][-1] == pytest.approx(100 / (2 * 25))

    def test_region_weights_ratio(self):
        weights = compute_weights({
            "big": np.r_[np.zeros(50), np.ones(50)],
            "small": np.r_[np.zeros(25), np.ones(25)]})
        # balanced classes: class weight 1, region weight = max/n
        assert np.allclose(weights["big"], 1.0)
        assert np.allclose(weights["small"], 2.0)

    def test_balanced_single_region_all_ones(self):
        y = np.r_[np.zeros(40), np.ones(40)]
        weights = compute_weights({"r": y})
        assert np.allclose(weights["r"], 1.0)

    def test_single_class_region_warns(self):
        with pytest.warns(UserWarning, match="no class-1"):
            weights = compute_weights({"r": np.zeros(10)})
        assert np.allclose(weights["r"], 0.5)


class TestF1:
    def test_paper_counts(self):
        counts = ConfusionCounts(tp=33_954, fp=3_770, fn=1_167, tn=88_128)
        assert f1_score(counts) == pytest.approx(0.932, abs=1e-3)

    def test_perfect(self):
        assert f1_score(ConfusionCounts(10, 0, 0, 5)) == 1.0

    def test_zero_tp(self):
        assert f1_score(ConfusionCounts(0, 3, 2, 5)) == 0.0

    def test_degenerate_flagged(self):
        with pytest.warns(UserWarning, match="undefined"):
            assert f1_score(ConfusionCounts(0, 0, 0, 5)) == 1.0
        report = metrics_from_predictions(np.zeros(5, bool), np.zeros(5, bool))
        assert report.f1_degenerate

    def test_per_class_accuracy_format(self):
        pred = np.r_[np.ones(33_954), np.zeros(1_167)].astype(bool)
        truth = np.ones(35_121, dtype=bool)
        report = metrics_from_predictions(pred, truth)
        assert report.accuracy_irrigated == pytest.approx(33_954 / 35_121)
        assert report.accuracy_irrigated == pytest.approx(0.967, abs=1e-3)


class TestBuildRegionDatasets:
    def test_split_partition(self):
        table = multi_region_table(["a", "b"])
        regions = build_region_datasets(table, "EVI")
        assert [r.name for r in regions] == ["a", "b"]
        for r in regions:
            total = len(r.train) + len(r.val) + len(r.test)
            assert total == 120

    def test_holdout_role(self):
        table = multi_region_table(["a", "b"])
        regions = build_region_datasets(table, "EVI", holdout_regions=("b",))
        roles = {r.name: r.role for r in regions}
        assert roles == {"a": "trainable", "b": "holdout_only"}

    def test_all_bands_requires_band_layers(self):
        table = multi_region_table(["a"])
        with pytest.raises(ValueError, match="ALL_BANDS"):
            build_region_datasets(table, "ALL_BANDS")


class TestTreeTraining:
    def test_merged_rows_count(self):
        table = multi_region_table(["a", "b"])
        regions = build_region_datasets(table, "EVI")
        config = TrainingRunConfig(seed=0)
        spec = ClassifierSpec("gbdt", seed=0, params={"max_rounds": 10})
        model = train_tree_models(regions, spec, config, ["EVI"])
        expect = sum(len(r.train) + len(r.val) for r in regions)
        assert model.training_meta["merged_rows"] == expect

    def test_evaluated_on_test_split(self):
        table = multi_region_table(["a", "b"])
        regions = build_region_datasets(table, "EVI")
        config = TrainingRunConfig(seed=0)
        spec = ClassifierSpec("gbdt", seed=0, params={"max_rounds": 30})
        model = train_tree_models(regions, spec, config, ["EVI"])
        reports = evaluate(model, regions, split="test")
        assert set(reports) == {"a", "b"}
        assert all(r.counts.total == len(reg.test)
                   for r, reg in zip(reports.values(), regions))

    def test_holdout_contributes_no_rows(self):
        table = multi_region_table(["a", "b"])
        regions = build_region_datasets(table, "EVI", holdout_regions=("b",))
        trainable = [r for r in regions if r.role == harness.TRAINABLE]
        config = TrainingRunConfig(seed=0)
        spec = ClassifierSpec("gbdt", seed=0, params={"max_rounds": 5})
        model = train_tree_models(trainable, spec, config, ["EVI"])
        only_a = sum(len(r.train) + len(r.val) for r in regions if r.name == "a")
        assert model.training_meta["merged_rows"] == only_a
        with pytest.raises(ValueError, match="no trainable"):
            train_tree_models([r for r in regions if r.role != harness.TRAINABLE],
                              spec, config, ["EVI"])


class TestNetworkLoop:
    def small_config(self, mode="EVI", max_epochs=4, patience=10):
        return TrainingRunConfig(input_mode=mode, batch_size=64,
                                 max_epochs=max_epochs, patience=patience,
                                 learning_rate=1e-3, seed=0)

    def test_epoch_cap_enforced(self):
        table = multi_region_table(["a", "b"], n_per_class=40)
        regions = build_region_datasets(table, "EVI")
        model, hist = train_network_loop(
            regions, ClassifierSpec("transformer", seed=0),
            self.small_config(max_epochs=3, patience=99), ["EVI"])
        assert len(hist["epochs"]) == 3

    def test_patience_stops_training(self):
        table = multi_region_table(["a"], n_per_class=40)
        regions = build_region_datasets(table, "EVI")
        config = TrainingRunConfig(input_mode="EVI", batch_size=64,
                                   max_epochs=30, patience=2,
                                   learning_rate=0.0, seed=0)   # frozen net
        model, hist = train_network_loop(
            regions, ClassifierSpec("transformer", seed=0), config, ["EVI"])
        # epoch 1 checkpoints (improves over -inf); then 2 stale epochs stop it
        assert len(hist["epochs"]) == 3
        assert hist["best_epoch"] == 1
        assert "flag" in hist

    def test_checkpoint_is_max_of_min_val_f1(self):
        table = multi_region_table(["a", "b"], n_per_class=40)
        regions = build_region_datasets(table, "EVI")
        model, hist = train_network_loop(
            regions, ClassifierSpec("transformer", seed=0),
            self.small_config(max_epochs=5), ["EVI"])
        series = [e["min_val_f1"] for e in hist["epochs"]]
        assert hist["best_min_val_f1"] == pytest.approx(max(series))
        best_epoch_metric = series[hist["best_epoch"] - 1]
        assert best_epoch_metric == pytest.approx(max(series))

    def test_checkpoint_sequence_monotone(self):
        table = multi_region_table(["a", "b"], n_per_class=40)
        regions = build_region_datasets(table, "EVI")
        _, hist = train_network_loop(
            regions, ClassifierSpec("transformer", seed=0),
            self.small_config(max_epochs=6), ["EVI"])
        best = -np.inf
        for epoch in hist["epochs"]:
            if epoch["checkpointed"]:
                assert epoch["min_val_f1"] > best
                best = epoch["min_val_f1"]

    def test_shifted_mode_runs_and_evaluates_unshifted(self):
        table = multi_region_table(["a", "b"], n_per_class=40)
        regions = build_region_datasets(table, "EVI")
        model, _ = train_network_loop(
            regions, ClassifierSpec("transformer", seed=0),
            self.small_config(mode="EVI_SHIFTED"), ["EVI"])
        reports = evaluate(model, regions, split="test")
        assert set(reports) == {"a", "b"}


class TestRegionSweep:
    def sweep(self, names, sizes, threads=1):
        table = multi_region_table(names, n_per_class=24)
        regions = build_region_datasets(table, "EVI")
        config = TrainingRunConfig(seed=0, threads=threads)
        spec = ClassifierSpec("gbdt", seed=0, params={"max_rounds": 4})
        return region_sweep(regions, sizes, spec, config, ["EVI"])

    def test_row_counts_all_sizes(self):
        names = [f"r{i}" for i in range(5)]
        result = self.sweep(names, sizes=[1, 2, 3, 4])
        for x in (1, 2, 3, 4):
            expect = math.comb(5, x) * (5 - x)
            assert len(result.rows_for_size(x)) == expect

    def test_aggregate_fields(self):
        result = self.sweep(["a", "b", "c"], sizes=[1, 2])
        agg = result.aggregate()
        assert set(agg) == {1, 2}
        assert agg[2]["n"] == math.comb(3, 2) * 1
        for stats in agg.values():
            assert 0 <= stats["p10_f1"] <= stats["mean_f1"] <= 1

    def test_threaded_equals_serial(self):
        names = ["a", "b", "c", "d"]
        serial = self.sweep(names, sizes=[2])
        threaded = self.sweep(names, sizes=[2], threads=4)
        key = lambda r: (r.subset, r.withheld)
        assert sorted(map(key, serial.rows)) == sorted(map(key, threaded.rows))
        for a, b in zip(sorted(serial.rows, key=key), sorted(threaded.rows, key=key)):
            assert a.f1 == b.f1

    def test_out_of_range_size_errors(self):
        with pytest.raises(ValueError):
            self.sweep(["a", "b"], sizes=[2])


class TestAlignment:
    def test_identical_models_align(self):
        table = multi_region_table(["a"], n_per_class=30)
        regions = build_region_datasets(table, "EVI")
        config = TrainingRunConfig(seed=0)
        spec = ClassifierSpec("gbdt", seed=0, params={"max_rounds": 5})
        model = train_tree_models(regions, spec, config, ["EVI"])
        report = prediction_alignment(model, model, regions)
        assert report["average_regional_alignment"] == 1.0

    def test_complementary_models_zero(self):
        class Flip:
            def __init__(self, model):
                self.model = model

            def predict(self, feats):
                return 1 - self.model.predict(feats)

        table = multi_region_table(["a"], n_per_class=30)
        regions = build_region_datasets(table, "EVI")
        config = TrainingRunConfig(seed=0)
        spec = ClassifierSpec("gbdt", seed=0, params={"max_rounds": 5})
        model = train_tree_models(regions, spec, config, ["EVI"])
        report = prediction_alignment(model, Flip(model), regions)
        assert report["average_regional_alignment"] == 0.0

    def test_disagreement_counts_sum(self):
        table = multi_region_table(["a", "b"], n_per_class=30)
        regions = build_region_datasets(table, "EVI")
        config = TrainingRunConfig(seed=0)
        gbdt = train_tree_models(regions, ClassifierSpec(
            "gbdt", seed=0, params={"max_rounds": 3}), config, ["EVI"])
        forest = train_tree_models(regions, ClassifierSpec(
            "random_forest", seed=0, params={"n_trees": 5}), config, ["EVI"])
        report = prediction_alignment(gbdt, forest, regions)
        for name, reg in zip(["a", "b"], regions):
            row = report["regions"][name]
            n = len(reg.train) + len(reg.val) + len(reg.test)
            assert (row["aligned_non_irrigated"] + row["aligned_irrigated"]
                    + row["misaligned_a0_b1"] + row["misaligned_a1_b0"]) == n


class TestAblation:
    def test_resplit_preserves_train_fraction(self):
        # At fraction 0.70 the training cut matches the default
        # 70/15/15 split's training polygon count per (region, class).
        table = multi_region_table(["a"], n_per_class=60)
        resplit = resplit_table(table, 0.70, seed=0)
        for cls in (0, 1):
            sel = resplit.classes == cls
            default_train = len(set(
                table.polygon_ids[sel & (table.splits == "train")].tolist()))
            train_polys = len(set(
                resplit.polygon_ids[sel & (resplit.splits == "train")].tolist()))
            assert train_polys == default_train
        assert not (resplit.splits == "val").any()

    def test_fraction_family_schema(self):
        table = multi_region_table(["a", "b", "c"], n_per_class=24)
        config = TrainingRunConfig(seed=0)
        spec = ClassifierSpec("gbdt", seed=0, params={"max_rounds": 3})
        family = harness.ablation_fraction(table, [0.15, 0.85], [1], spec, config)
        assert set(family) == {0.15, 0.85}
        for result in family.values():
            assert len(result.rows_for_size(1)) == 3 * 2

    def test_transformer_rejected(self):
        table = multi_region_table(["a", "b"], n_per_class=24)
        config = TrainingRunConfig(seed=0)
        with pytest.raises(ValueError, match="tree"):
            harness.ablation_fraction(table, [0.5], [1],
                                      ClassifierSpec("transformer"), config)
