"""Synthetic generator: determinism, admissibility guarantees, world coherence."""

import numpy as np
import pytest

from irrimap import admissibility, synth
from irrimap import timeseries as ts
from irrimap.labels import rasterize_polygon

GRID = ts.TimeGrid()


class TestGenerateSeries:
    def test_noiseless_non_irrigated_peak_at_center(self):
        profile = synth.default_profile("non_irrigated", phase_offset=2,
                                        noise_std=0.0)
        rng = np.random.default_rng(0)
        params = synth.draw_pulse_params(profile, rng)
        series = synth.pulse_series(params, 36)
        center = params.pulses[0][0]
        assert abs(np.argmax(series) - center) <= 0.51
        assert 11 <= center <= 14       # rainy center shifted by +2

    def test_noiseless_irrigated_dry_peak(self):
        profile = synth.default_profile("irrigated", noise_std=0.0)
        rng = np.random.default_rng(1)
        series, label = synth.generate_series(profile, rng, GRID)
        assert label == 1
        dry = ts.season_window(GRID, "dry")
        assert series[dry.lo:dry.hi + 1].max() > 0.2

    def test_evergreen_fails_p10_rule(self):
        profile = synth.default_profile("evergreen")
        rng = np.random.default_rng(2)
        for _ in range(50):
            series, _ = synth.generate_series(profile, rng, GRID)
            assert not admissibility.evaluate_criteria(series, 2.0, GRID).p10_low

    def test_clamped_range(self):
        profile = synth.default_profile("irrigated", noise_std=0.4)
        rng = np.random.default_rng(3)
        for _ in range(30):
            series, _ = synth.generate_series(profile, rng, GRID)
            assert series.min() >= -0.2
            assert series.max() <= 1.0

    def test_admissibility_rates(self):
        rng = np.random.default_rng(4)
        n = 600
        rates = {}
        for cls in synth.CLASSES:
            profile = synth.default_profile(cls)
            hits = sum(
                admissibility.evaluate_criteria(
                    synth.generate_series(profile, rng, GRID)[0], 2.0, GRID
                ).admissible
                for _ in range(n))
            rates[cls] = hits / n
        assert rates["irrigated"] >= 0.99
        assert rates["evergreen"] <= 0.01
        assert rates["barren"] <= 0.01


class TestGenerateRegion:
    def test_exact_counts_and_balance(self):
        spec = synth.RegionSpec("r", counts={"non_irrigated": 100, "irrigated": 100})
        table, planted = synth.generate_region(spec, seed=0)
        assert len(table) == 200
        assert int(table.classes.sum()) == 100
        assert not planted.any()

    def test_same_seed_identical(self):
        spec = synth.RegionSpec("r", counts={"non_irrigated": 40, "irrigated": 40})
        a, _ = synth.generate_region(spec, seed=9)
        b, _ = synth.generate_region(spec, seed=9)
        assert np.array_equal(a.series, b.series)
        assert np.array_equal(a.splits.astype(str), b.splits.astype(str))

    def test_contamination_flags(self):
        spec = synth.RegionSpec("r", counts={"non_irrigated": 100, "irrigated": 100},
                                contamination=0.1)
        table, planted = synth.generate_region(spec, seed=1)
        assert planted.sum() == 20      # 10% of each class
        dry = ts.season_window(GRID, "dry")
        planted_non_irr = planted & (table.classes == 0)
        # planted rows in the non-irrigated class look irrigated
        assert (table.series[planted_non_irr, 0, dry.lo:dry.hi + 1].max(axis=1)
                > 0.2).all()

    def test_polygon_grouping(self):
        spec = synth.RegionSpec("r", counts={"non_irrigated": 30, "irrigated": 0},
                                pixels_per_polygon=10)
        table, _ = synth.generate_region(spec, seed=2)
        ids, counts = np.unique(table.polygon_ids, return_counts=True)
        assert len(ids) == 3
        assert (counts == 10).all()


class TestGenerateWorld:
    @pytest.fixture(scope="class")
    def world(self):
        config = synth.WorldConfig(width=96, height=96, zones=2, seed=0,
                                   phase_offsets=[0, 1])
        return synth.generate_world(config)

    def test_shapes_cross_validate(self, world):
        header = world.stack.header
        assert (header.height, header.width) == world.truth.shape
        assert world.slope.shape == world.truth.shape
        assert world.zones.ids.shape == world.truth.shape
        assert world.stack.valid.all()

    def test_truth_matches_polygon_rasterization(self, world):
        h, w = world.truth.shape
        mask = np.zeros((h, w), dtype=bool)
        for poly in world.polygons:
            if poly.class_name == "irrigated":
                pixels = rasterize_polygon(poly, h, w)
                mask[pixels[:, 0], pixels[:, 1]] = True
        assert np.array_equal(mask, world.truth == 1)

    def test_polygons_disjoint(self, world):
        h, w = world.truth.shape
        cover = np.zeros((h, w), dtype=np.int32)
        for poly in world.polygons:
            pixels = rasterize_polygon(poly, h, w)
            cover[pixels[:, 0], pixels[:, 1]] += 1
        assert cover.max() <= 1

    def test_noise_seed_changes_values_not_geometry(self):
        config_a = synth.WorldConfig(width=64, height=64, seed=5, noise_seed=1,
                                     fields_per_zone={"irrigated": 2, "non_irrigated": 2})
        config_b = synth.WorldConfig(width=64, height=64, seed=5, noise_seed=2,
                                     fields_per_zone={"irrigated": 2, "non_irrigated": 2})
        wa = synth.generate_world(config_a)
        wb = synth.generate_world(config_b)
        assert np.array_equal(wa.truth, wb.truth)
        assert [p.rings[0].tolist() for p in wa.polygons] == \
               [p.rings[0].tolist() for p in wb.polygons]
        assert not np.array_equal(wa.stack.values, wb.stack.values)

    def test_slope_plateaus_exceed_limit(self, world):
        assert (world.slope > 8.0).any()
        assert (world.slope[world.truth == 1] < 8.0).all()

    def test_overfull_zone_errors(self):
        config = synth.WorldConfig(width=32, height=32, zones=2,
                                   fields_per_zone={"irrigated": 50,
                                                    "non_irrigated": 50})
        with pytest.raises(ValueError, match="overlap"):
            synth.generate_world(config)


class TestScenes:
    def test_scene_index_roundtrip(self):
        config = synth.WorldConfig(width=48, height=48, zones=1, seed=2,
                                   fields_per_zone={"irrigated": 2, "non_irrigated": 2})
        world = synth.generate_world(config)
        scenes = synth.generate_scenes(world, pad=1, scenes_per_window=1,
                                       empty_window_fraction=0.0, seed=0)
        # one scene per window incl. pads
        assert len(scenes) == 36 + 2
        evi = ts.compute_evi(scenes[5].bands[0], scenes[5].bands[1],
                             scenes[5].bands[2])
        target = np.clip(world.stack.values[4, 0], 0.0, 0.95)
        assert np.allclose(evi, target, atol=1e-5)

    def test_scene_cloud_fraction_consistent(self):
        config = synth.WorldConfig(width=48, height=48, zones=1, seed=3,
                                   fields_per_zone={"irrigated": 2, "non_irrigated": 2})
        world = synth.generate_world(config)
        scenes = synth.generate_scenes(world, pad=0, seed=1)
        for scene in scenes:
            assert scene.cloud_fraction == pytest.approx(scene.cloud_mask.mean())
            assert scene.cloud_fraction < 0.10
