"""Synthetic phenology generator: ground truth for every pipeline stage.

Series are sums of Gaussian pulses over a low baseline plus iid noise,
clamped to a plausible vegetation-index range.  Non-irrigated profiles carry
a single rainy-season pulse; irrigated profiles add a dry-season pulse;
evergreen profiles ride a high baseline; barren profiles stay flat and low.
Region-level phase offsets shift pulse centers by whole timesteps, the
mechanism for exercising shift-augmentation transferability.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import timeseries as ts
from .labels import split_polygons
from .raster_io import (Polygon, PolygonSet, RasterStack, SampleTable,
                        StackHeader, ZoneMap)
from .mosaic import SceneImage

CLASSES = ("non_irrigated", "irrigated", "evergreen", "barren")

CLAMP_LO = -0.2
CLAMP_HI = 1.0

# Reflectance constants used to synthesize bands consistent with a target
# index value (index -> near-infrared is invertible at fixed blue/red).
SCENE_BLUE = 0.05
SCENE_RED = 0.08


@dataclass(frozen=True)
class PhenologyProfile:
    class_name: str
    baseline: tuple[float, float] = (0.04, 0.10)
    rainy_center: tuple[float, float] = (9.0, 12.0)
    rainy_width: tuple[float, float] = (1.8, 3.0)
    rainy_amplitude: tuple[float, float] = (0.40, 0.65)
    dry_center: tuple[float, float] | None = None
    dry_width: tuple[float, float] | None = None
    dry_amplitude: tuple[float, float] | None = None
    noise_std: float = 0.03
    phase_offset: int = 0

    def __post_init__(self):
        if self.class_name not in CLASSES:
            raise ValueError(f"unknown profile class {self.class_name!r}")
        if abs(self.phase_offset) > 3:
            raise ValueError("|phase offset| must be <= 3")


def default_profile(class_name: str, phase_offset: int = 0,
                    noise_std: float = 0.03) -> PhenologyProfile:
    common = dict(phase_offset=phase_offset, noise_std=noise_std)
    if class_name == "non_irrigated":
        return PhenologyProfile("non_irrigated", **common)
    if class_name == "irrigated":
        return PhenologyProfile(
            "irrigated", dry_center=(21.5, 26.5), dry_width=(1.3, 2.2),
            dry_amplitude=(0.30, 0.55), **common)
    if class_name == "evergreen":
        return PhenologyProfile(
            "evergreen", baseline=(0.35, 0.50), rainy_amplitude=(0.05, 0.15),
            **common)
    if class_name == "barren":
        return PhenologyProfile(
            "barren", baseline=(0.02, 0.06), rainy_amplitude=(0.0, 0.0),
            **common)
    raise ValueError(f"unknown profile class {class_name!r}")


@dataclass
class PulseParams:
    baseline: float
    pulses: list[tuple[float, float, float]]   # (center, width, amplitude)


def draw_pulse_params(profile: PhenologyProfile, rng: np.random.Generator) -> PulseParams:
    """Polygon-level draw: pixels of one polygon share these parameters."""
    def u(lohi):
        return float(rng.uniform(*lohi))

    pulses = []
    amp = u(profile.rainy_amplitude)
    if amp > 0:
        pulses.append((u(profile.rainy_center) + profile.phase_offset,
                       u(profile.rainy_width), amp))
    if profile.dry_amplitude is not None:
        pulses.append((u(profile.dry_center) + profile.phase_offset,
                       u(profile.dry_width), u(profile.dry_amplitude)))
    return PulseParams(u(profile.baseline), pulses)


def pulse_series(params: PulseParams, timesteps: int) -> np.ndarray:
    t = np.arange(timesteps, dtype=np.float64)
    out = np.full(timesteps, params.baseline)
    for center, width, amplitude in params.pulses:
        out += amplitude * np.exp(-((t - center) ** 2) / (2 * width ** 2))
    return out


def generate_series(profile: PhenologyProfile, rng: np.random.Generator,
                    grid: ts.TimeGrid | None = None) -> tuple[np.ndarray, int]:
    """One noisy series and its irrigation truth label (1 iff irrigated)."""
    grid = grid or ts.TimeGrid()
    params = draw_pulse_params(profile, rng)
    clean = pulse_series(params, grid.timesteps)
    noisy = clean + rng.normal(0.0, profile.noise_std, grid.timesteps)
    return np.clip(noisy, CLAMP_LO, CLAMP_HI), int(profile.class_name == "irrigated")


@dataclass
class RegionSpec:
    name: str
    counts: dict[str, int] = field(default_factory=lambda: {"non_irrigated": 100,
                                                            "irrigated": 100})
    phase_offset: int = 0
    noise_std: float = 0.03
    contamination: float = 0.0
    pixels_per_polygon: int = 12
    # Per-class overrides of the default profile fields, e.g.
    # {"irrigated": {"dry_center": (23.5, 24.5)}}; timing-sensitivity
    # studies tighten the draws so the region offset is the only timing
    # variation.
    profile_overrides: dict | None = None


def generate_region(spec: RegionSpec, seed: int = 0,
                    grid: ts.TimeGrid | None = None, id_start: int = 1,
                    split_seed: int | None = None
                    ) -> tuple[SampleTable, np.ndarray]:
    """Labeled samples for one region, grouped into synthetic polygons.

    Pixels of one polygon share pulse parameters and differ by noise.
    ``contamination`` plants that fraction of wrong-class series per class;
    the returned boolean mask flags the planted rows.
    """
    grid = grid or ts.TimeGrid()
    rng = np.random.default_rng(seed)
    profiles = {}
    for c in CLASSES:
        profile = default_profile(c, spec.phase_offset, spec.noise_std)
        if spec.profile_overrides and c in spec.profile_overrides:
            profile = replace(profile, **{k: tuple(v) if isinstance(v, (list, tuple))
                                          else v
                                          for k, v in spec.profile_overrides[c].items()})
        profiles[c] = profile

    regions, polygon_ids, classes, series, planted = [], [], [], [], []
    poly_refs = []
    next_id = id_start
    for class_name in ("non_irrigated", "irrigated"):
        n = spec.counts.get(class_name, 0)
        if n < 1:
            continue
        profile = profiles[class_name]
        opposite = profiles["irrigated" if class_name == "non_irrigated"
                            else "non_irrigated"]
        made = 0
        while made < n:
            take = min(spec.pixels_per_polygon, n - made)
            params = draw_pulse_params(profile, rng)
            clean = pulse_series(params, grid.timesteps)
            for _ in range(take):
                noisy = clean + rng.normal(0.0, profile.noise_std, grid.timesteps)
                regions.append(spec.name)
                polygon_ids.append(next_id)
                classes.append(1 if class_name == "irrigated" else 0)
                series.append(np.clip(noisy, CLAMP_LO, CLAMP_HI))
                planted.append(False)
            poly_refs.append(_PolyRef(next_id, spec.name, class_name))
            next_id += 1
            made += take
        # Plant wrong-class series inside existing rows of this class.
        n_plant = int(round(spec.contamination * n))
        if n_plant:
            rows = [i for i, c in enumerate(classes)
                    if (c == 1) == (class_name == "irrigated")
                    and regions[i] == spec.name]
            chosen = rng.choice(len(rows), size=n_plant, replace=False)
            for ci in chosen:
                i = rows[int(ci)]
                series[i], _ = generate_series(opposite, rng, grid)
                planted[i] = True

    assignment = split_polygons(poly_refs, seed=seed if split_seed is None else split_seed)
    splits = [assignment.split_of(pid) for pid in polygon_ids]
    table = SampleTable(np.array(regions, dtype=object),
                        np.array(polygon_ids), np.array(classes),
                        np.array(splits, dtype=object), ["EVI"],
                        np.stack(series)[:, None, :])
    return table, np.array(planted)


@dataclass
class _PolyRef:
    id: int
    region: str
    class_name: str


@dataclass
class WorldConfig:
    width: int = 128
    height: int = 128
    zones: int = 2
    fields_per_zone: dict[str, int] = field(default_factory=lambda: {
        "irrigated": 5, "non_irrigated": 5})
    field_side: tuple[int, int] = (4, 9)
    margin: int = 2
    phase_offsets: list[int] | None = None
    noise_std: float = 0.03
    seed: int = 0
    noise_seed: int | None = None
    slope_plateaus: int = 2
    base_slope_percent: float = 2.0
    plateau_slope_percent: float = 12.0
    grid: ts.TimeGrid = field(default_factory=ts.TimeGrid)


@dataclass
class World:
    stack: RasterStack
    polygons: PolygonSet
    zones: ZoneMap
    slope: np.ndarray
    truth: np.ndarray


def generate_world(config: WorldConfig) -> World:
    """Coherent world: index stack, field polygons, zone map, slope, truth.

    Fields are placed on a non-overlapping cell lattice per zone; the zone
    map partitions the raster into vertical strips.  The geometry depends
    only on ``seed``; per-pixel noise additionally depends on ``noise_seed``.
    """
    rng_geo = np.random.default_rng(config.seed)
    rng_noise = np.random.default_rng(
        config.seed + 1 if config.noise_seed is None else config.noise_seed)
    grid = config.grid
    w, h = config.width, config.height
    t = grid.timesteps
    offsets = config.phase_offsets or [0] * config.zones
    if len(offsets) != config.zones:
        raise ValueError("need one phase offset per zone")

    strip = w // config.zones
    zone_ids = np.zeros((h, w), dtype=np.int32)
    for z in range(config.zones):
        lo = z * strip
        hi = w if z == config.zones - 1 else (z + 1) * strip
        zone_ids[:, lo:hi] = z + 1
    zones = ZoneMap(zone_ids, {z + 1: f"zone_{z + 1}" for z in range(config.zones)})

    # Background: per-pixel non-irrigated draws, vectorized via shared shape
    # per zone plus per-pixel noise.
    values = np.empty((t, h, w), dtype=np.float64)
    truth = np.zeros((h, w), dtype=np.int8)
    for z in range(config.zones):
        sel = zone_ids == z + 1
        profile = default_profile("non_irrigated", offsets[z], config.noise_std)
        params = draw_pulse_params(profile, rng_geo)
        clean = pulse_series(params, t)
        n_px = int(sel.sum())
        noise = rng_noise.normal(0.0, config.noise_std, (t, n_px))
        values[:, sel] = np.clip(clean[:, None] + noise, CLAMP_LO, CLAMP_HI)

    # Field placement on a per-zone cell lattice.
    side_max = config.field_side[1]
    cell = side_max + 2 * config.margin
    polygons = []
    next_id = 1
    for z in range(config.zones):
        lo = z * strip
        hi = w if z == config.zones - 1 else (z + 1) * strip
        cells = [(r, c) for r in range(0, h - cell + 1, cell)
                 for c in range(lo, hi - cell + 1, cell)]
        needed = sum(config.fields_per_zone.values())
        if needed > len(cells):
            raise ValueError(
                f"zone {z + 1}: {needed} fields do not fit {len(cells)} cells "
                "(polygons would overlap)")
        order = rng_geo.permutation(len(cells))
        picked = [cells[i] for i in order[:needed]]
        i = 0
        for class_name, count in sorted(config.fields_per_zone.items()):
            profile = default_profile(class_name, offsets[z], config.noise_std)
            for _ in range(count):
                r0, c0 = picked[i]
                i += 1
                fh = int(rng_geo.integers(config.field_side[0], side_max + 1))
                fw = int(rng_geo.integers(config.field_side[0], side_max + 1))
                r0 += config.margin
                c0 += config.margin
                ring = np.array([[c0, r0], [c0 + fw, r0],
                                 [c0 + fw, r0 + fh], [c0, r0 + fh]], dtype=float)
                polygons.append(Polygon(next_id, f"zone_{z + 1}", class_name, [ring]))
                next_id += 1
                params = draw_pulse_params(profile, rng_geo)
                clean = pulse_series(params, t)
                noise = rng_noise.normal(0.0, config.noise_std, (t, fh, fw))
                values[:, r0:r0 + fh, c0:c0 + fw] = np.clip(
                    clean[:, None, None] + noise, CLAMP_LO, CLAMP_HI)
                if class_name == "irrigated":
                    truth[r0:r0 + fh, c0:c0 + fw] = 1

    # Slope: gentle base with a few impractically steep plateaus on background.
    slope = np.full((h, w), config.base_slope_percent)
    for _ in range(config.slope_plateaus):
        ph = int(rng_geo.integers(h // 8, h // 4 + 1))
        pw = int(rng_geo.integers(w // 8, w // 4 + 1))
        r0 = int(rng_geo.integers(0, max(h - ph, 1)))
        c0 = int(rng_geo.integers(0, max(w - pw, 1)))
        patch = slope[r0:r0 + ph, c0:c0 + pw]
        free = truth[r0:r0 + ph, c0:c0 + pw] == 0
        patch[free] = config.plateau_slope_percent

    header = StackHeader(width=w, height=h, bands=["EVI"], timesteps=t,
                         start_date=grid.start_date, step_days=grid.step_days)
    stack = RasterStack(header, values[:, None, :, :].astype(np.float32),
                        np.ones((t, 1, h, w), dtype=bool))
    return World(stack, PolygonSet(polygons), zones, slope, truth)


def index_to_nir(evi: np.ndarray, blue: float = SCENE_BLUE,
                 red: float = SCENE_RED) -> np.ndarray:
    """Near-infrared reflectance whose index value reproduces ``evi``."""
    evi = np.asarray(evi, dtype=np.float64)
    c = ts.EVI_C1 * red - ts.EVI_C2 * blue + ts.EVI_L
    return (ts.EVI_GAIN * red + evi * c) / (ts.EVI_GAIN - evi)


def generate_scenes(world: World, pad: int = 5, scenes_per_window: int = 2,
                    empty_window_fraction: float = 0.05, cloud_blobs: int = 2,
                    seed: int = 0) -> list[SceneImage]:
    """Per-window acquisition scenes consistent with the world's index stack.

    Bands are (blue, red, nir) with nir solved so the index roundtrips.
    Each non-empty window gets ``scenes_per_window`` scenes with random
    rectangular cloud masks; a fraction of interior windows carry no scene
    at all, exercising temporal interpolation.
    """
    from datetime import date, timedelta

    rng = np.random.default_rng(seed)
    grid = world.stack.header
    t = grid.timesteps
    h, w = grid.height, grid.width
    evi = np.asarray(world.stack.values[:, 0], dtype=np.float64)
    start = date.fromisoformat(grid.start_date)

    scenes = []
    for wi in range(-pad, t + pad):
        core = np.clip(wi, 0, t - 1)
        if 0 < wi < t - 1 and rng.random() < empty_window_fraction:
            continue
        window_evi = np.clip(evi[core], 0.0, 0.95)
        nir = index_to_nir(window_evi)
        bands = np.stack([np.full((h, w), SCENE_BLUE),
                          np.full((h, w), SCENE_RED), nir])
        day0 = start + timedelta(days=int(wi) * grid.step_days)
        for si in range(scenes_per_window):
            mask = np.zeros((h, w), dtype=bool)
            for _ in range(cloud_blobs):
                bh = int(rng.integers(h // 16 + 1, h // 6 + 2))
                bw = int(rng.integers(w // 16 + 1, w // 6 + 2))
                r0 = int(rng.integers(0, max(h - bh, 1)))
                c0 = int(rng.integers(0, max(w - bw, 1)))
                mask[r0:r0 + bh, c0:c0 + bw] = True
            if mask.mean() >= 0.10:
                mask[:] = False     # keep every emitted scene usable
            scenes.append(SceneImage(
                acquisition_date=(day0 + timedelta(days=2 + 5 * si)).isoformat(),
                bands=bands, cloud_mask=mask,
                scene_id=f"w{wi:+03d}s{si}"))
    return scenes
