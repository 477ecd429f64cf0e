"""On-disk artifacts: raster stacks, sample tables, polygon sets, zone maps.

A stack lives in three sibling files sharing one stem: ``<name>.stack.json``
(header), ``<name>.data.bin`` (little-endian float32, index order
``((t*B + b)*H + r)*W + c``) and ``<name>.mask.bin`` (validity bitmask, one
bit per cell in the same order, MSB-first within each byte, padded to a whole
byte).  Invalid cells are written as NaN; the bitmask is authoritative.

Sample tables are CSV with header ``region,polygon_id,class,split,layer,
t00..t{T-1}``, one row per (pixel, feature layer); rows of one pixel are
consecutive and cover each layer exactly once, in a fixed layer order.
Polygons are a JSON array; zone maps reuse the stack format (1 band,
1 timestep, integer-valued reals) plus a ``{id: name}`` JSON sidecar.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STACK_VERSION = 1
SAMPLE_COLUMNS = ("region", "polygon_id", "class", "split", "layer")
SPLITS = ("train", "val", "test")
CLASS_NAMES = {"non_irrigated": 0, "irrigated": 1}


@dataclass
class StackHeader:
    width: int
    height: int
    bands: list[str]
    timesteps: int
    start_date: str = "2020-06-01"
    step_days: int = 10
    pixel_size_m: float = 10.0
    nodata_policy: str = "nan"
    data_file: str = ""
    version: int = STACK_VERSION

    def __post_init__(self):
        if min(self.width, self.height, self.timesteps, len(self.bands)) < 1:
            raise ValueError("width, height, timesteps and bands must all be >= 1")
        if self.step_days <= 0:
            raise ValueError("step_days must be positive")
        if len(set(self.bands)) != len(self.bands):
            raise ValueError("band names must be unique")

    @property
    def cells(self) -> int:
        return self.timesteps * len(self.bands) * self.height * self.width

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.timesteps, len(self.bands), self.height, self.width)


@dataclass
class RasterStack:
    """Dense (t, b, r, c) array with a validity mask; the unit of imagery."""

    header: StackHeader
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.header.shape:
            raise ValueError(
                f"array shape {self.values.shape} does not match header {self.header.shape}")
        if self.valid.shape != self.values.shape:
            raise ValueError("valid mask shape must match values")
        # The NaN sentinel mirrors the mask; the mask stays authoritative.
        self.values[~self.valid] = np.nan

    def band_index(self, name: str) -> int:
        try:
            return self.header.bands.index(name)
        except ValueError:
            raise KeyError(f"stack has no band {name!r}") from None


def _stack_stem(path) -> Path:
    path = Path(path)
    name = path.name
    if name.endswith(".stack.json"):
        return path.with_name(name[: -len(".stack.json")])
    return path


def write_stack(stack: RasterStack, path) -> None:
    stem = _stack_stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = stack.header
    header.data_file = stem.name + ".data.bin"
    doc = {
        "version": header.version,
        "width": header.width,
        "height": header.height,
        "bands": header.bands,
        "timesteps": header.timesteps,
        "start_date": header.start_date,
        "step_days": header.step_days,
        "pixel_size_m": header.pixel_size_m,
        "nodata_policy": header.nodata_policy,
        "data_file": header.data_file,
    }
    with open(stem.parent / (stem.name + ".stack.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    stack.values.astype("<f4").tofile(stem.parent / header.data_file)
    bits = np.packbits(stack.valid.reshape(-1).astype(np.uint8))
    bits.tofile(stem.parent / (stem.name + ".mask.bin"))


def read_stack(path) -> RasterStack:
    stem = _stack_stem(path)
    header_path = stem.parent / (stem.name + ".stack.json")
    try:
        with open(header_path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValueError(f"unreadable stack header {header_path}: {exc}") from exc
    if doc.get("version") != STACK_VERSION:
        raise ValueError(f"unknown stack version {doc.get('version')!r}")
    header = StackHeader(
        width=doc["width"], height=doc["height"], bands=list(doc["bands"]),
        timesteps=doc["timesteps"], start_date=doc["start_date"],
        step_days=doc["step_days"], pixel_size_m=doc["pixel_size_m"],
        nodata_policy=doc["nodata_policy"], data_file=doc["data_file"],
        version=doc["version"])
    data_path = stem.parent / header.data_file
    raw = np.fromfile(data_path, dtype="<f4")
    if raw.size < header.cells:
        raise ValueError(
            f"truncated data file {data_path}: {raw.size} cells, header implies {header.cells}")
    if raw.size > header.cells:
        raise ValueError(
            f"oversized data file {data_path}: {raw.size} cells, header implies {header.cells}")
    values = raw.reshape(header.shape)
    mask_path = stem.parent / (stem.name + ".mask.bin")
    bits = np.fromfile(mask_path, dtype=np.uint8)
    if bits.size * 8 < header.cells:
        raise ValueError(f"truncated mask file {mask_path}")
    valid = np.unpackbits(bits)[: header.cells].astype(bool).reshape(header.shape)
    return RasterStack(header, values, valid)


@dataclass
class SampleTable:
    """Labeled pixel timeseries: one row per pixel, layers stacked in axis 1."""

    regions: np.ndarray          # (N,) str
    polygon_ids: np.ndarray      # (N,) int
    classes: np.ndarray          # (N,) int, 0 = non-irrigated, 1 = irrigated
    splits: np.ndarray           # (N,) str in {train, val, test}
    layers: list[str]            # L layer names (band names or "EVI")
    series: np.ndarray           # (N, L, T) float

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=object)
        self.polygon_ids = np.asarray(self.polygon_ids, dtype=np.int64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        self.series = np.asarray(self.series, dtype=np.float64)
        n = len(self.regions)
        if self.series.shape[:2] != (n, len(self.layers)):
            raise ValueError("series must have shape (N, L, T)")
        if not np.isin(self.classes, [0, 1]).all():
            raise ValueError("class labels must be 0 or 1")
        if not np.isin(self.splits.astype(str), SPLITS).all():
            raise ValueError(f"splits must be one of {SPLITS}")

    def __len__(self) -> int:
        return len(self.regions)

    @property
    def timesteps(self) -> int:
        return self.series.shape[2]

    def subset(self, mask: np.ndarray) -> "SampleTable":
        return SampleTable(self.regions[mask], self.polygon_ids[mask],
                           self.classes[mask], self.splits[mask],
                           list(self.layers), self.series[mask])

    def layer_series(self, name: str) -> np.ndarray:
        try:
            i = self.layers.index(name)
        except ValueError:
            raise KeyError(f"table has no layer {name!r}") from None
        return self.series[:, i, :]


def concat_tables(tables: list[SampleTable]) -> SampleTable:
    if not tables:
        raise ValueError("no tables to concatenate")
    layers = tables[0].layers
    t = tables[0].timesteps
    for tab in tables[1:]:
        if tab.layers != layers or tab.timesteps != t:
            raise ValueError("tables disagree on layers or timesteps")
    return SampleTable(
        np.concatenate([tab.regions for tab in tables]),
        np.concatenate([tab.polygon_ids for tab in tables]),
        np.concatenate([tab.classes for tab in tables]),
        np.concatenate([tab.splits for tab in tables]),
        list(layers),
        np.concatenate([tab.series for tab in tables]))


def write_samples(table: SampleTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t = table.timesteps
    header = list(SAMPLE_COLUMNS) + [f"t{i:02d}" for i in range(t)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(table)):
            for li, layer in enumerate(table.layers):
                row = [table.regions[i], int(table.polygon_ids[i]),
                       int(table.classes[i]), table.splits[i], layer]
                row += [f"{v:.9g}" for v in table.series[i, li]]
                writer.writerow(row)


def read_samples(path) -> SampleTable:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty samples file {path}") from None
        if tuple(header[:5]) != SAMPLE_COLUMNS:
            raise ValueError(
                f"samples file {path} missing columns: expected {SAMPLE_COLUMNS}, got {tuple(header[:5])}")
        t = len(header) - 5
        if t < 1 or header[5] != "t00":
            raise ValueError(f"samples file {path} has no timestep columns")

        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5 + t:
                raise ValueError(f"ragged row at line {lineno}: {len(row)} fields, expected {5 + t}")
            cls = int(row[2])
            if cls not in (0, 1):
                raise ValueError(f"class {cls} outside {{0,1}} at line {lineno}")
            if row[3] not in SPLITS:
                raise ValueError(f"unknown split {row[3]!r} at line {lineno}")
            rows.append((row[0], int(row[1]), cls, row[3], row[4],
                         np.array(row[5:], dtype=np.float64)))
    if not rows:
        raise ValueError(f"samples file {path} has no data rows")

    layers = []
    for row in rows:
        if row[4] not in layers:
            layers.append(row[4])
    n_layers = len(layers)
    if len(rows) % n_layers != 0:
        raise ValueError("row count is not a multiple of the layer count")

    n = len(rows) // n_layers
    regions = np.empty(n, dtype=object)
    polygon_ids = np.empty(n, dtype=np.int64)
    classes = np.empty(n, dtype=np.int64)
    splits = np.empty(n, dtype=object)
    series = np.empty((n, n_layers, t), dtype=np.float64)
    for i in range(n):
        chunk = rows[i * n_layers:(i + 1) * n_layers]
        seen = {c[4] for c in chunk}
        if seen != set(layers):
            raise ValueError(
                f"pixel starting at data row {i * n_layers + 1} does not cover every layer once")
        key = chunk[0][:4]
        for c in chunk:
            if c[:4] != key:
                raise ValueError(
                    f"pixel starting at data row {i * n_layers + 1} mixes metadata across layers")
            series[i, layers.index(c[4])] = c[5]
        regions[i], polygon_ids[i], classes[i], splits[i] = key
    return SampleTable(regions, polygon_ids, classes, splits, layers, series)


@dataclass
class Polygon:
    id: int
    region: str
    class_name: str
    rings: list[np.ndarray] = field(default_factory=list)

    @property
    def class_label(self) -> int:
        return CLASS_NAMES[self.class_name]


@dataclass
class PolygonSet:
    polygons: list[Polygon]

    def __len__(self) -> int:
        return len(self.polygons)

    def __iter__(self):
        return iter(self.polygons)


def write_polygons(polys: PolygonSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = [{"id": p.id, "region": p.region, "class": p.class_name,
            "rings": [np.asarray(r, dtype=float).tolist() for r in p.rings]}
           for p in polys]
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def read_polygons(path) -> PolygonSet:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    polygons = []
    for rec in doc:
        cls = rec["class"]
        if cls not in CLASS_NAMES:
            raise ValueError(f"polygon {rec.get('id')}: unknown class {cls!r}")
        rings = []
        for ring in rec["rings"]:
            pts = np.asarray(ring, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2:
                raise ValueError(f"polygon {rec.get('id')}: ring is not a list of [x, y] pairs")
            if len(pts) >= 2 and np.array_equal(pts[0], pts[-1]):
                pts = pts[:-1]
            if len(pts) < 3:
                raise ValueError(f"polygon {rec.get('id')}: ring has fewer than 3 vertices")
            rings.append(pts)
        if not rings:
            raise ValueError(f"polygon {rec.get('id')}: no rings")
        polygons.append(Polygon(int(rec["id"]), rec["region"], cls, rings))
    return PolygonSet(polygons)


@dataclass
class ZoneMap:
    ids: np.ndarray              # (H, W) int
    names: dict[int, str]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        present = set(np.unique(self.ids).tolist()) - {0}
        missing = present - set(self.names)
        if missing:
            raise ValueError(f"zone ids missing from the name table: {sorted(missing)}")


def write_zone_map(zones: ZoneMap, path) -> None:
    stem = _stack_stem(path)
    h, w = zones.ids.shape
    header = StackHeader(width=w, height=h, bands=["zone"], timesteps=1)
    stack = RasterStack(header, zones.ids[None, None].astype(np.float32),
                        np.ones((1, 1, h, w), dtype=bool))
    write_stack(stack, stem)
    with open(stem.parent / (stem.name + ".names.json"), "w") as fh:
        json.dump({str(k): v for k, v in zones.names.items()}, fh, indent=2)
        fh.write("\n")


def read_zone_map(path) -> ZoneMap:
    stem = _stack_stem(path)
    stack = read_stack(stem)
    ids = stack.values[0, 0]
    if not np.allclose(ids, np.round(ids), atol=0, rtol=0, equal_nan=False):
        raise ValueError("zone raster holds non-integer values")
    with open(stem.parent / (stem.name + ".names.json")) as fh:
        names = {int(k): v for k, v in json.load(fh).items()}
    return ZoneMap(ids.astype(np.int32), names)


def write_raster(values: np.ndarray, path, band: str = "value",
                 pixel_size_m: float = 10.0, start_date: str = "2020-06-01") -> None:
    """Persist a single (H, W) raster using the 1-band, 1-timestep stack format."""
    values = np.asarray(values, dtype=np.float32)
    h, w = values.shape
    header = StackHeader(width=w, height=h, bands=[band], timesteps=1,
                         pixel_size_m=pixel_size_m, start_date=start_date)
    valid = np.isfinite(values)[None, None]
    write_stack(RasterStack(header, values[None, None], valid), path)


def read_raster(path) -> tuple[np.ndarray, StackHeader]:
    stack = read_stack(path)
    if stack.header.timesteps != 1 or len(stack.header.bands) != 1:
        warnings.warn("reading first band/timestep of a multi-layer stack as a raster")
    return np.asarray(stack.values[0, 0], dtype=np.float64), stack.header
