"""Raster-scale prediction: admissibility pre-filter plus classifier over
tiles, small-component sieving, zone change accounting, and bitemporal
composites.

Inadmissible pixels are forced to the non-irrigated class without invoking
the model, so the classifier only ever sees pixels that could plausibly be
irrigated cropland.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import admissibility
from . import timeseries as ts
from .classifiers import TrainedModel
from .raster_io import RasterStack, ZoneMap

MIN_AREA_HA = 0.1
NEITHER, A_ONLY, B_ONLY, BOTH = 0, 1, 2, 3


@dataclass
class PredictionRaster:
    classes: np.ndarray         # (H, W) in {0, 1}
    probability: np.ndarray     # (H, W) in [0, 1]
    year_tag: str = ""


def predict_raster(model: TrainedModel, stack: RasterStack,
                   slope_percent: np.ndarray, tile_size: int = 256,
                   year_tag: str = "") -> PredictionRaster:
    """Classify every admissible pixel of a fully valid index stack.

    The stack must carry the model's single input layer.  Output is
    independent of ``tile_size``; inadmissible pixels get class 0 and
    probability 0 without a model call.
    """
    if len(model.layers) != 1:
        raise ValueError("raster prediction supports single-layer models")
    if not stack.valid.all():
        raise ValueError("stack must be fully valid (gap-filled) for inference")
    evi = np.asarray(stack.values[:, 0], dtype=np.float64)     # (T, H, W)
    t, h, w = evi.shape
    slope_percent = np.asarray(slope_percent, dtype=np.float64)
    if slope_percent.shape != (h, w):
        raise ValueError(f"slope shape {slope_percent.shape} != raster {(h, w)}")
    grid = ts.TimeGrid(stack.header.start_date, stack.header.step_days, t)

    classes = np.zeros((h, w), dtype=np.int8)
    proba = np.zeros((h, w))
    for r0 in range(0, h, tile_size):
        for c0 in range(0, w, tile_size):
            r1, c1 = min(r0 + tile_size, h), min(c0 + tile_size, w)
            tile = evi[:, r0:r1, c0:c1]
            ok = admissibility.admissibility_grid(
                tile, slope_percent[r0:r1, c0:c1], grid)
            if not ok.any():
                continue
            rows, cols = np.nonzero(ok)
            batch = tile[:, rows, cols].T[:, None, :]          # (N, 1, T)
            p = model.predict_proba(batch)
            proba[r0 + rows, c0 + cols] = p
            classes[r0 + rows, c0 + cols] = (p >= 0.5).astype(np.int8)
    return PredictionRaster(classes, proba, year_tag)


def pixel_threshold(min_area_ha: float, pixel_size_m: float) -> int:
    """Smallest pixel count NOT removed: components below ceil(area/px) go."""
    return int(np.ceil(min_area_ha * 10_000.0 / (pixel_size_m ** 2)))


def sieve_small_components(classes: np.ndarray, min_area_ha: float = MIN_AREA_HA,
                           pixel_size_m: float = 10.0,
                           connectivity: int = 4) -> np.ndarray:
    """Remove connected irrigated components smaller than the area floor.

    4-connectivity by default; at 10 m pixels the 0.1 Ha floor keeps
    components of 10 pixels and larger.
    """
    classes = np.asarray(classes)
    if connectivity == 4:
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    elif connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    else:
        raise ValueError("connectivity must be 4 or 8")
    labeled, n = ndimage.label(classes == 1, structure=structure)
    if n == 0:
        return classes.copy()
    floor = pixel_threshold(min_area_ha, pixel_size_m)
    sizes = np.bincount(labeled.reshape(-1))
    small = sizes < floor
    small[0] = False
    out = classes.copy()
    out[small[labeled]] = 0
    return out


@dataclass
class ZoneChange:
    zone: str
    hectares_a: float
    hectares_b: float
    total_hectares: float
    percent_change: float | None       # None when year A has zero area
    change_fraction_of_total: float


@dataclass
class ChangeReport:
    zones: list[ZoneChange]
    total: ZoneChange


def zone_statistics(classes_a: np.ndarray, classes_b: np.ndarray,
                    zones: ZoneMap, pixel_size_m: float = 10.0) -> ChangeReport:
    """Irrigated hectares per zone for two years with change accounting.

    Percent change is (B - A) / A * 100, flagged undefined (None) when the
    first year has no irrigated area; the change as a fraction of zone area
    is reported regardless.
    """
    a = np.asarray(classes_a) == 1
    b = np.asarray(classes_b) == 1
    if a.shape != b.shape or a.shape != zones.ids.shape:
        raise ValueError("rasters and zone map must share shape")
    ha_per_px = pixel_size_m ** 2 / 10_000.0

    def change(name, npx_a, npx_b, npx_total) -> ZoneChange:
        ha, hb = npx_a * ha_per_px, npx_b * ha_per_px
        total = npx_total * ha_per_px
        pct = ((hb - ha) / ha * 100.0) if ha > 0 else None
        frac = (hb - ha) / total * 100.0 if total > 0 else 0.0
        return ZoneChange(name, ha, hb, total, pct, frac)

    rows = []
    for zid in sorted(zones.names):
        sel = zones.ids == zid
        rows.append(change(zones.names[zid], int(a[sel].sum()),
                           int(b[sel].sum()), int(sel.sum())))
    total = change("Total", int(a[zones.ids > 0].sum()),
                   int(b[zones.ids > 0].sum()), int((zones.ids > 0).sum()))
    return ChangeReport(rows, total)


def bitemporal_composite(classes_a: np.ndarray, classes_b: np.ndarray) -> np.ndarray:
    """Four-category change raster: neither / A-only / B-only / both."""
    a = np.asarray(classes_a) == 1
    b = np.asarray(classes_b) == 1
    if a.shape != b.shape:
        raise ValueError("rasters must share shape")
    out = np.full(a.shape, NEITHER, dtype=np.int8)
    out[a & ~b] = A_ONLY
    out[~a & b] = B_ONLY
    out[a & b] = BOTH
    return out
