"""KS statistics, OLS with exact t p-values, and saliency maps."""

import math

import numpy as np
import pytest

from irrimap import diagnostics, harness, synth
from irrimap import timeseries as ts
from irrimap.classifiers import ClassifierSpec
from irrimap.diagnostics import (EmpiricalCDF, grad_cam, ks_1d, ks_pseudo_1d,
                                 ols_fit, region_similarity_matrix, t_sf)


class TestKs1d:
    def test_identical_zero(self):
        x = np.random.default_rng(0).normal(size=50)
        assert ks_1d(x, x) == 0.0

    def test_disjoint_one(self):
        assert ks_1d([0.0], [1.0]) == 1.0

    def test_uniform_offset_half(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, 1000)
        b = rng.uniform(0.5, 1.5, 1000)
        # analytic sup|F1-F2| = 0.5; DKW gives ~0.06 slack at n=1000
        assert ks_1d(a, b) == pytest.approx(0.5, abs=0.06)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            ks_1d([], [1.0])

    def test_monotone_transform_invariant(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=80)
        b = rng.normal(1.0, 2.0, size=120)
        d1 = ks_1d(a, b)
        f = lambda x: np.exp(0.5 * x) + x
        assert ks_1d(f(a), f(b)) == pytest.approx(d1, abs=1e-12)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=rng.integers(2, 40))
            b = rng.normal(size=rng.integers(2, 40))
            assert 0 <= ks_1d(a, b) <= 1

    def test_matches_slow_definition(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=30)
        b = rng.normal(0.4, 1.3, size=50)
        support = np.concatenate([a, b])
        slow = max(abs((a <= x).mean() - (b <= x).mean()) for x in support)
        assert ks_1d(a, b) == pytest.approx(slow, abs=1e-12)


class TestKsPseudo1d:
    def test_identical_zero(self):
        x = np.random.default_rng(5).normal(size=(40, 10))
        assert ks_pseudo_1d(x, x) == 0.0

    def test_all_ones_sqrt10(self):
        a = np.zeros((5, 10))
        b = np.ones((5, 10))
        assert ks_pseudo_1d(a, b) == pytest.approx(math.sqrt(10), abs=1e-12)

    def test_matches_bruteforce_composition(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(30, 10))
        b = rng.normal(0.3, 1.1, size=(45, 10))
        brute = math.sqrt(sum(ks_1d(a[:, k], b[:, k]) ** 2 for k in range(10)))
        assert ks_pseudo_1d(a, b) == pytest.approx(brute, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(20, 4))
        b = rng.normal(size=(25, 4))
        assert ks_pseudo_1d(a, b) == ks_pseudo_1d(b, a)

    def test_dimension_mismatch_errors(self):
        with pytest.raises(ValueError):
            ks_pseudo_1d(np.zeros((5, 3)), np.zeros((5, 4)))


class TestRegionSimilarity:
    def region_series(self, phases, n=80, noise=0.03, seed=0):
        out = {}
        for i, (name, phase) in enumerate(phases.items()):
            spec = synth.RegionSpec(name, counts={"irrigated": n,
                                                  "non_irrigated": 0},
                                    phase_offset=phase, noise_std=noise)
            table, _ = synth.generate_region(spec, seed=seed + i)
            out[name] = table.series[:, 0, :]
        return out

    def test_matrix_properties(self):
        series = self.region_series({"a": 0, "b": 0, "c": 1})
        report = region_similarity_matrix(series, dims=10)
        assert np.allclose(report.matrix, report.matrix.T)
        assert np.allclose(np.diag(report.matrix), 0.0)
        assert np.all(report.matrix >= 0)
        assert np.all(report.matrix <= math.sqrt(10) + 1e-9)

    def test_shifted_region_has_largest_row_mean(self):
        series = self.region_series({"a": 0, "b": 0, "c": 0, "d": 3})
        report = region_similarity_matrix(series, dims=10)
        means = dict(zip(report.regions, report.row_means))
        assert max(means, key=means.get) == "d"

    def test_small_region_errors(self):
        with pytest.raises(ValueError, match="fewer than 2"):
            region_similarity_matrix({"a": np.zeros((1, 36)),
                                      "b": np.zeros((5, 36))})


def numeric_t_sf(t_stat, dof, n_grid=400_000):
    """Two-sided tail by trapezoid integration of the t density."""
    t_stat = abs(t_stat)
    const = math.exp(math.lgamma((dof + 1) / 2) - math.lgamma(dof / 2)) \
        / math.sqrt(dof * math.pi)
    x = np.linspace(0, t_stat, n_grid)
    density = const * (1 + x ** 2 / dof) ** (-(dof + 1) / 2)
    return 1.0 - 2.0 * np.trapezoid(density, x)


class TestTDistribution:
    def test_matches_numeric_integration(self):
        for t_stat, dof in [(0.5, 3), (1.2, 10), (2.5, 47), (4.0, 7)]:
            assert t_sf(t_stat, dof) == pytest.approx(
                numeric_t_sf(t_stat, dof), abs=1e-8)

    def test_symmetric_point(self):
        assert t_sf(0.0, 12) == pytest.approx(1.0, abs=1e-12)


class TestOls:
    def test_exact_fit(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(40, 3))
        beta = np.array([0.5, -1.0, 2.0])
        y = 0.7 + x @ beta
        report = ols_fit(x, y)
        assert np.allclose(report.coefficients, np.r_[0.7, beta], atol=1e-9)
        assert report.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_null_coefficient_not_significant(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(500, 2))
        y = 1.0 + 0.8 * x[:, 0] + rng.normal(0, 0.5, 500)   # x1 is null
        report = ols_fit(x, y)
        assert report.p_values[1] < 0.05       # real effect
        assert report.p_values[2] > 0.05       # null effect

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(50, 3))
        y = rng.normal(size=50)
        report = ols_fit(x, y)

        design = np.column_stack([np.ones(50), x])
        beta = np.linalg.solve(design.T @ design, design.T @ y)
        resid = y - design @ beta
        dof = 50 - 4
        sigma2 = resid @ resid / dof
        cov = sigma2 * np.linalg.inv(design.T @ design)
        se = np.sqrt(np.diag(cov))
        p = [numeric_t_sf(t, dof) for t in beta / se]
        assert np.allclose(report.coefficients, beta, atol=1e-6)
        assert np.allclose(report.standard_errors, se, atol=1e-6)
        assert np.allclose(report.p_values, p, atol=1e-6)

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(60, 4))
        y = rng.normal(size=60)
        report = ols_fit(x, y)
        design = np.column_stack([np.ones(60), x])
        resid = y - design @ report.coefficients
        assert np.abs(design.T @ resid).max() < 1e-8 * max(1.0, np.abs(y).max())

    def test_rank_deficiency_names_columns(self):
        x = np.random.default_rng(12).normal(size=(30, 2))
        x = np.column_stack([x, x[:, 0]])       # duplicate column
        with pytest.raises(ValueError, match="collinear"):
            ols_fit(x, np.zeros(30), column_names=["a", "b", "a_copy"])

    def test_sweep_design_matrix(self):
        rows = [harness.SweepRow(("a", "b"), "c", 0.9, None, None,
                                 harness.ConfusionCounts(1, 0, 0, 1)),
                harness.SweepRow(("b",), "a", 0.7, None, None,
                                 harness.ConfusionCounts(1, 0, 0, 1))]
        x, y = diagnostics.sweep_design_matrix(rows, ["a", "b", "c"])
        assert np.array_equal(x, [[1, 1, 0], [0, 1, 0]])
        assert np.allclose(y, [0.9, 0.7])


class TestEmpiricalCDF:
    def test_step_function(self):
        cdf = EmpiricalCDF([1.0, 2.0, 2.0, 4.0])
        assert cdf(0.5) == 0.0
        assert cdf(1.0) == 0.25
        assert cdf(2.0) == 0.75
        assert cdf(5.0) == 1.0

    def test_monotone(self):
        rng = np.random.default_rng(13)
        cdf = EmpiricalCDF(rng.normal(size=40))
        grid_points = np.linspace(-4, 4, 200)
        vals = cdf(grid_points)
        assert np.all(np.diff(vals) >= 0)


def train_saliency_model(seed=0):
    """Small no-penultimate transformer trained on clean synthetic regions."""
    tables = []
    for i, name in enumerate(["a", "b"]):
        spec = synth.RegionSpec(name, counts={"non_irrigated": 250,
                                              "irrigated": 250}, noise_std=0.04)
        table, _ = synth.generate_region(spec, seed=seed + i,
                                         id_start=1 + 10_000 * i)
        tables.append(table)
    from irrimap.raster_io import concat_tables
    table = concat_tables(tables)
    regions = harness.build_region_datasets(table, "EVI")
    config = harness.TrainingRunConfig(input_mode="EVI", batch_size=128,
                                       max_epochs=12, patience=12,
                                       learning_rate=3e-3, seed=seed)
    spec = ClassifierSpec("transformer", seed=seed,
                          params={"penultimate": False})
    model, _ = harness.train_network_loop(regions, spec, config, ["EVI"])
    return model, table


class TestGradCam:
    @pytest.fixture(scope="class")
    def saliency(self):
        model, table = train_saliency_model()
        return model, table

    def test_importances_normalized(self, saliency):
        model, table = saliency
        out = grad_cam(model, table.series[:64])
        assert out.importances.shape == (64, 36)
        assert np.all(out.importances >= 0)
        assert np.all(out.importances <= 1)
        peaks = out.importances.max(axis=1)
        assert np.all((peaks == pytest.approx(1.0)) | out.flags)

    def test_constant_encoder_uniform(self):
        # With A constant over time, alpha_k * A[t, k] cannot vary in t.
        rng = np.random.default_rng(20)
        row = rng.normal(size=32)
        a = np.tile(row, (2, 36, 1))
        dlogit_da = rng.normal(size=(2, 36, 32))
        out = diagnostics.saliency_from_encoder(a, dlogit_da)
        for i in range(2):
            if not out.flags[i]:
                assert np.ptp(out.importances[i]) < 1e-9
                assert np.allclose(out.importances[i], 1.0)

    def test_penultimate_model_rejected(self):
        from irrimap.classifiers import NetworkConfig, TrainedModel, network
        cfg = NetworkConfig(input_layers=1, timesteps=36, penultimate=True)
        params = network.init_params(cfg, seed=0)
        model = TrainedModel("transformer", "EVI", ["EVI"], 36,
                             np.zeros(1), np.ones(1), params,
                             network_config=cfg)
        with pytest.raises(ValueError, match="penultimate"):
            grad_cam(model, np.zeros((2, 1, 36)))

    def test_irrigated_dry_window_emphasis(self, saliency):
        model, table = saliency
        irr = table.series[table.classes == 1][:200]
        out = grad_cam(model, irr)
        emphasis = diagnostics.dry_window_emphasis(out, ts.TimeGrid())
        assert emphasis.mean() >= 0.8
