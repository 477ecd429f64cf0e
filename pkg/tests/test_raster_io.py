"""Roundtrips and format contracts for every on-disk artifact."""

import numpy as np
import pytest

from irrimap.raster_io import (Polygon, PolygonSet, RasterStack, SampleTable,
                               StackHeader, ZoneMap, read_polygons, read_raster,
                               read_samples, read_stack, read_zone_map,
                               write_polygons, write_raster, write_samples,
                               write_stack, write_zone_map)


def small_stack(rng, t=2, b=1, h=2, w=2, with_gaps=True):
    header = StackHeader(width=w, height=h, bands=[f"b{i}" for i in range(b)],
                         timesteps=t)
    values = rng.normal(size=(t, b, h, w)).astype(np.float32)
    valid = np.ones((t, b, h, w), dtype=bool)
    if with_gaps:
        valid[rng.random((t, b, h, w)) < 0.3] = False
    return RasterStack(header, values, valid)


class TestStackRoundtrip:
    def test_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        stack = small_stack(rng)
        write_stack(stack, tmp_path / "s")
        again = read_stack(tmp_path / "s.stack.json")
        assert np.array_equal(again.valid, stack.valid)
        # bit-exact where valid; NaN sentinel elsewhere
        assert np.array_equal(again.values[again.valid], stack.values[stack.valid])
        assert np.isnan(again.values[~again.valid]).all()

    def test_paper_grid_header_accepted(self, tmp_path):
        header = StackHeader(width=2, height=2, bands=["EVI"], timesteps=36,
                             start_date="2020-06-01", step_days=10)
        values = np.zeros((36, 1, 2, 2), dtype=np.float32)
        stack = RasterStack(header, values, np.ones_like(values, dtype=bool))
        write_stack(stack, tmp_path / "y")
        again = read_stack(tmp_path / "y")
        assert again.header.timesteps == 36
        assert again.header.step_days == 10
        assert again.header.start_date == "2020-06-01"

    def test_truncated_data_errors(self, tmp_path):
        rng = np.random.default_rng(1)
        stack = small_stack(rng)
        write_stack(stack, tmp_path / "s")
        data = (tmp_path / "s.data.bin").read_bytes()
        (tmp_path / "s.data.bin").write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            read_stack(tmp_path / "s")

    def test_unknown_version_errors(self, tmp_path):
        rng = np.random.default_rng(2)
        write_stack(small_stack(rng), tmp_path / "s")
        header = (tmp_path / "s.stack.json").read_text().replace(
            '"version": 1', '"version": 99')
        (tmp_path / "s.stack.json").write_text(header)
        with pytest.raises(ValueError, match="version"):
            read_stack(tmp_path / "s")

    def test_header_shape_mismatch_errors(self):
        header = StackHeader(width=2, height=2, bands=["a"], timesteps=2)
        with pytest.raises(ValueError):
            RasterStack(header, np.zeros((2, 1, 2, 3), dtype=np.float32),
                        np.ones((2, 1, 2, 3), dtype=bool))

    def test_index_order_counter_pattern(self, tmp_path):
        # offset = ((t*B + b)*H + r)*W + c checked at the corners.
        t, b, h, w = 3, 2, 4, 5
        header = StackHeader(width=w, height=h, bands=["x", "y"], timesteps=t)
        values = np.arange(t * b * h * w, dtype=np.float32).reshape(t, b, h, w)
        stack = RasterStack(header, values, np.ones_like(values, dtype=bool))
        write_stack(stack, tmp_path / "c")
        raw = np.fromfile(tmp_path / "c.data.bin", dtype="<f4")
        for ti, bi, ri, ci in [(0, 0, 0, 0), (t - 1, b - 1, h - 1, w - 1),
                               (1, 0, 3, 2), (2, 1, 0, 4)]:
            offset = ((ti * b + bi) * h + ri) * w + ci
            assert raw[offset] == values[ti, bi, ri, ci]

    def test_header_invariants(self):
        with pytest.raises(ValueError):
            StackHeader(width=0, height=2, bands=["a"], timesteps=1)
        with pytest.raises(ValueError):
            StackHeader(width=1, height=1, bands=["a", "a"], timesteps=1)
        with pytest.raises(ValueError):
            StackHeader(width=1, height=1, bands=["a"], timesteps=1, step_days=0)


def small_table(rng, n=6, layers=("EVI",), t=36):
    splits = np.array(["train", "val", "test"])[rng.integers(0, 3, n)]
    return SampleTable(
        regions=np.array([f"r{i % 2}" for i in range(n)], dtype=object),
        polygon_ids=rng.integers(1, 4, n),
        classes=rng.integers(0, 2, n),
        splits=splits.astype(object),
        layers=list(layers),
        series=rng.normal(size=(n, len(layers), t)))


class TestSamples:
    def test_single_row(self, tmp_path):
        table = SampleTable(np.array(["a"], dtype=object), np.array([1]),
                            np.array([1]), np.array(["train"], dtype=object),
                            ["EVI"], np.zeros((1, 1, 36)))
        write_samples(table, tmp_path / "s.csv")
        got = read_samples(tmp_path / "s.csv")
        assert got.timesteps == 36
        assert len(got) == 1

    def test_roundtrip_9_digits(self, tmp_path):
        rng = np.random.default_rng(3)
        table = small_table(rng, n=40, layers=("blue", "red", "EVI"))
        write_samples(table, tmp_path / "t.csv")
        got = read_samples(tmp_path / "t.csv")
        assert got.layers == table.layers
        assert np.array_equal(got.classes, table.classes)
        assert np.array_equal(got.polygon_ids, table.polygon_ids)
        assert np.allclose(got.series, table.series, rtol=1e-8, atol=0)
        # second write is byte-identical: the 9-digit form is a fixed point
        write_samples(got, tmp_path / "t2.csv")
        assert (tmp_path / "t.csv").read_bytes() == (tmp_path / "t2.csv").read_bytes()

    def test_bad_class_errors(self, tmp_path):
        path = tmp_path / "bad.csv"
        head = "region,polygon_id,class,split,layer," + ",".join(
            f"t{i:02d}" for i in range(3))
        path.write_text(head + "\na,1,2,train,EVI,0,0,0\n")
        with pytest.raises(ValueError, match="class"):
            read_samples(path)

    def test_ragged_row_errors(self, tmp_path):
        path = tmp_path / "bad.csv"
        head = "region,polygon_id,class,split,layer," + ",".join(
            f"t{i:02d}" for i in range(3))
        path.write_text(head + "\na,1,1,train,EVI,0,0\n")
        with pytest.raises(ValueError, match="ragged"):
            read_samples(path)

    def test_missing_column_errors(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("region,polygon_id,class,layer,t00\na,1,1,EVI,0\n")
        with pytest.raises(ValueError, match="missing columns"):
            read_samples(path)

    def test_big_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        table = small_table(rng, n=2000)
        write_samples(table, tmp_path / "big.csv")
        got = read_samples(tmp_path / "big.csv")
        assert np.allclose(got.series, table.series, rtol=1e-8)
        assert np.array_equal(got.splits.astype(str), table.splits.astype(str))


class TestPolygons:
    def test_unit_square(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('[{"id": 1, "region": "a", "class": "irrigated",'
                        '"rings": [[[0,0],[1,0],[1,1],[0,1]]]}]')
        polys = read_polygons(path)
        assert len(polys) == 1
        assert polys.polygons[0].rings[0].shape == (4, 2)

    def test_closed_ring_normalized(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('[{"id": 1, "region": "a", "class": "non_irrigated",'
                        '"rings": [[[0,0],[1,0],[1,1],[0,1],[0,0]]]}]')
        polys = read_polygons(path)
        assert polys.polygons[0].rings[0].shape == (4, 2)

    def test_two_vertex_ring_errors(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('[{"id": 1, "region": "a", "class": "irrigated",'
                        '"rings": [[[0,0],[1,1]]]}]')
        with pytest.raises(ValueError, match="fewer than 3"):
            read_polygons(path)

    def test_unknown_class_errors(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('[{"id": 1, "region": "a", "class": "wet",'
                        '"rings": [[[0,0],[1,0],[1,1]]]}]')
        with pytest.raises(ValueError, match="class"):
            read_polygons(path)

    def test_roundtrip(self, tmp_path):
        polys = PolygonSet([
            Polygon(1, "a", "irrigated",
                    [np.array([[0, 0], [4, 0], [4, 3], [0, 3]], dtype=float)]),
            Polygon(2, "b", "non_irrigated",
                    [np.array([[5, 5], [9, 5], [7, 8]], dtype=float)])])
        write_polygons(polys, "/tmp/irrimap_poly_test.json")
        got = read_polygons("/tmp/irrimap_poly_test.json")
        assert [p.id for p in got] == [1, 2]
        assert np.allclose(got.polygons[0].rings[0], polys.polygons[0].rings[0])


class TestZoneMap:
    def test_roundtrip(self, tmp_path):
        ids = np.array([[0, 1, 1], [2, 2, 0]], dtype=np.int32)
        zones = ZoneMap(ids, {1: "east", 2: "west"})
        write_zone_map(zones, tmp_path / "z")
        got = read_zone_map(tmp_path / "z")
        assert np.array_equal(got.ids, ids)
        assert got.names == {1: "east", 2: "west"}

    def test_missing_name_errors(self):
        with pytest.raises(ValueError, match="name table"):
            ZoneMap(np.array([[1, 3]]), {1: "east"})


class TestRaster:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        field = rng.normal(size=(7, 9)).astype(np.float32)
        write_raster(field, tmp_path / "r", band="slope")
        got, header = read_raster(tmp_path / "r")
        assert np.allclose(got, field, atol=1e-7)
        assert header.bands == ["slope"]
