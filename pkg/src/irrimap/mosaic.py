"""Cloud-free, temporally regular stacks from per-acquisition scenes.

Scenes falling in one 10-day window are composited per pixel by pulling from
the least-cloudy scene first; windows with persistent cloud (or no scene at
all) are temporally interpolated, everything is Savitzky-Golay smoothed per
band, and padding windows collected beyond the core period are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from . import timeseries as ts
from .raster_io import RasterStack, StackHeader


@dataclass
class SceneImage:
    acquisition_date: str        # ISO date
    bands: np.ndarray            # (B, H, W)
    cloud_mask: np.ndarray       # (H, W) booleans, True = clouded
    scene_id: str = ""

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        self.cloud_mask = np.asarray(self.cloud_mask, dtype=bool)
        if self.bands.ndim != 3:
            raise ValueError("scene bands must be (B, H, W)")
        if self.cloud_mask.shape != self.bands.shape[1:]:
            raise ValueError("cloud mask shape must match scene bands")

    @property
    def cloud_fraction(self) -> float:
        return float(self.cloud_mask.mean())


@dataclass(frozen=True)
class MosaicConfig:
    scene_cloud_threshold: float = 0.10
    timestep_days: int = 10
    pad_timesteps: int = 5

    def __post_init__(self):
        if not 0 < self.scene_cloud_threshold <= 1:
            raise ValueError("scene_cloud_threshold must be in (0, 1]")
        if self.pad_timesteps < 0:
            raise ValueError("pad_timesteps must be >= 0")


@dataclass
class InterpolationReport:
    total_fraction: float
    fraction_due_to_empty_window: float
    rainy_fraction: float | None
    dry_fraction: float | None

    def as_dict(self) -> dict:
        return {
            "total_fraction_interpolated": self.total_fraction,
            "fraction_interpolated_due_to_no_scene": self.fraction_due_to_empty_window,
            "rainy_season_fraction": self.rainy_fraction,
            "dry_season_fraction": self.dry_fraction,
        }


def _scene_order(scenes: list[SceneImage]) -> list[SceneImage]:
    # Ascending cloud fraction; ties broken by acquisition date then scene id.
    return sorted(scenes, key=lambda s: (s.cloud_fraction, s.acquisition_date, s.scene_id))


def composite_timestep(scenes: list[SceneImage], config: MosaicConfig
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Compose one window's scenes into a (B, H, W) raster + (H, W) validity.

    Per pixel the value comes from the least-cloudy scene in which it is
    unclouded; pixels clouded in every scene (or with no scenes at all) are
    invalid.
    """
    usable = [s for s in scenes if s.cloud_fraction < config.scene_cloud_threshold]
    if not usable:
        raise ValueError("composite_timestep needs at least one usable scene")
    shapes = {s.bands.shape for s in usable}
    if len(shapes) > 1:
        raise ValueError(f"scenes disagree on shape: {sorted(shapes)}")
    ordered = _scene_order(usable)
    b, h, w = ordered[0].bands.shape
    out = np.full((b, h, w), np.nan)
    valid = np.zeros((h, w), dtype=bool)
    for scene in ordered:
        take = ~scene.cloud_mask & ~valid
        if take.any():
            out[:, take] = scene.bands[:, take]
            valid |= take
        if valid.all():
            break
    return out, valid


def build_stack(scenes: list[SceneImage], config: MosaicConfig,
                grid: ts.TimeGrid, bands: list[str],
                pixel_size_m: float = 10.0,
                ) -> tuple[RasterStack, InterpolationReport]:
    """Composite, interpolate and smooth scenes into a fully valid stack.

    ``grid`` describes the core period; ``config.pad_timesteps`` extra
    windows on each side are composited to stabilize edge interpolation and
    dropped after smoothing.  Scenes at or above the cloud threshold are
    discarded up front.  The interpolation report describes the core
    windows' pre-interpolation validity.
    """
    usable = [s for s in scenes if s.cloud_fraction < config.scene_cloud_threshold]
    start = date.fromisoformat(grid.start_date)
    pad = config.pad_timesteps
    n_windows = grid.timesteps + 2 * pad
    padded_start = start - timedelta(days=pad * grid.step_days)

    by_window: list[list[SceneImage]] = [[] for _ in range(n_windows)]
    for scene in usable:
        offset = (date.fromisoformat(scene.acquisition_date) - padded_start).days
        w = offset // grid.step_days
        if 0 <= w < n_windows:
            by_window[w].append(scene)

    shapes = {s.bands.shape for s in usable}
    if len(shapes) != 1:
        raise ValueError("need scenes of one common shape inside the period")
    b, h, w = next(iter(shapes))
    if b != len(bands):
        raise ValueError(f"scenes carry {b} bands, {len(bands)} names given")

    values = np.full((n_windows, b, h, w), np.nan)
    valid = np.zeros((n_windows, b, h, w), dtype=bool)
    empty_window = np.zeros(n_windows, dtype=bool)
    for wi, group in enumerate(by_window):
        if not group:
            empty_window[wi] = True
            continue
        comp, ok = composite_timestep(group, config)
        values[wi] = comp
        valid[wi] = ok[None, :, :]

    core = slice(pad, pad + grid.timesteps)
    report = interpolation_stats(valid[core], empty_window[core], grid)

    never_valid = ~valid.any(axis=0)
    if never_valid.any():
        bi, ri, ci = np.argwhere(never_valid)[0]
        raise ValueError(
            f"pixel (band={bands[bi]}, row={ri}, col={ci}) is invalid at every timestep")

    flat = values.reshape(n_windows, -1).T          # (B*H*W, n_windows)
    flat_ok = valid.reshape(n_windows, -1).T
    filled = ts.fill_gaps_grid(flat, flat_ok)
    smoothed = ts.savgol_grid(filled, axis=-1)
    out = smoothed.T.reshape(n_windows, b, h, w)[core]

    header = StackHeader(width=w, height=h, bands=list(bands),
                         timesteps=grid.timesteps, start_date=grid.start_date,
                         step_days=grid.step_days, pixel_size_m=pixel_size_m)
    stack = RasterStack(header, out.astype(np.float32),
                        np.ones_like(out, dtype=bool))
    return stack, report


def interpolation_stats(valid: np.ndarray, empty_window: np.ndarray,
                        grid: ts.TimeGrid) -> InterpolationReport:
    """Summarize how much of a pre-interpolation mask needs filling.

    ``valid`` is the (T, ...) core validity mask; ``empty_window`` flags
    windows that had no scene at all.  Season fractions are reported only
    for the standard annual grid (computed per 36-step year otherwise when
    the step count is a multiple of 36).
    """
    valid = np.asarray(valid, dtype=bool)
    empty_window = np.asarray(empty_window, dtype=bool)
    t = valid.shape[0]
    if empty_window.shape[0] != t:
        raise ValueError("empty_window length must match mask timesteps")
    interpolated = ~valid
    total = float(interpolated.mean())
    if interpolated.any():
        due_empty = float(interpolated[empty_window].sum() / interpolated.sum())
    else:
        due_empty = 0.0

    rainy = dry = None
    if t % 36 == 0 and grid.step_days == 10 and grid.start_month_day == (6, 1):
        year_grid = ts.TimeGrid(grid.start_date, grid.step_days, 36)
        rainy_w = ts.season_window(year_grid, "rainy")
        dry_w = ts.season_window(year_grid, "dry")
        year_idx = np.arange(t) % 36
        rainy_sel = (year_idx >= rainy_w.lo) & (year_idx <= rainy_w.hi)
        dry_sel = (year_idx >= dry_w.lo) & (year_idx <= dry_w.hi)
        rainy = float(interpolated[rainy_sel].mean())
        dry = float(interpolated[dry_sel].mean())
    return InterpolationReport(total, due_empty, rainy, dry)
