"""Per-pixel timeseries numerics: vegetation index, gap filling, smoothing,
splines, percentiles, seasonal windows, shift augmentation, standardization.

All operations are pure and vectorized where it matters; the grid-level
variants (``fill_gaps_grid``, ``savgol_grid``) operate along the last axis so
whole stacks can be processed without Python loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import convolve1d
from scipy.signal import savgol_filter

EVI_GAIN = 2.5
EVI_C1 = 6.0
EVI_C2 = 7.5
EVI_L = 1.0

SAVGOL_WINDOW = 5
SAVGOL_ORDER = 3

MAX_SHIFT = 3

# Cumulative day offsets from a June 1 anchor, non-leap counts.
_MONTH_DAYS = {6: 30, 7: 31, 8: 31, 9: 30, 10: 31, 11: 30,
               12: 31, 1: 31, 2: 28, 3: 31, 4: 30, 5: 31}

DRY_SEASON = ("december", 1, "april", 1)
RAINY_SEASON = ("june", 1, "october", 1)


@dataclass(frozen=True)
class TimeGrid:
    """Regular temporal grid: ISO start date, step in days, step count."""

    start_date: str = "2020-06-01"
    step_days: int = 10
    timesteps: int = 36

    def __post_init__(self):
        if self.step_days <= 0:
            raise ValueError("step_days must be positive")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")

    @property
    def start_month_day(self) -> tuple[int, int]:
        parts = self.start_date.split("-")
        return int(parts[1]), int(parts[2])

    def is_standard_year(self) -> bool:
        """True for the June-1-anchored, 10-day, 36-step annual grid."""
        return (self.start_month_day == (6, 1)
                and self.step_days == 10 and self.timesteps == 36)


@dataclass
class TimeSeries:
    values: np.ndarray
    valid: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("values and valid must share shape")
        if self.values.shape[-1] != self.grid.timesteps:
            raise ValueError("series length does not match grid timesteps")


@dataclass(frozen=True)
class SeasonWindow:
    """Inclusive timestep index range for a named calendar season."""

    kind: str
    lo: int
    hi: int

    def indices(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)


def compute_evi(blue, red, nir):
    """Enhanced vegetation index from blue/red/near-infrared reflectance.

    EVI = 2.5 * (nir - red) / (nir + 6*red - 7.5*blue + 1), clamped to
    [-1, 1].  Non-finite inputs or a vanishing denominator yield NaN so the
    caller can flag the cell invalid.
    """
    blue = np.asarray(blue, dtype=np.float64)
    red = np.asarray(red, dtype=np.float64)
    nir = np.asarray(nir, dtype=np.float64)
    denom = nir + EVI_C1 * red - EVI_C2 * blue + EVI_L
    bad = (~np.isfinite(blue) | ~np.isfinite(red) | ~np.isfinite(nir)
           | (np.abs(denom) < 1e-12))
    with np.errstate(divide="ignore", invalid="ignore"):
        evi = EVI_GAIN * (nir - red) / denom
    evi = np.clip(evi, -1.0, 1.0)
    evi = np.where(bad, np.nan, evi)
    if evi.ndim == 0:
        return float(evi)
    return evi


def fill_gaps_grid(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill invalid entries along the last axis.

    Interior gaps are linearly interpolated between the nearest valid
    neighbors; leading/trailing gaps copy the nearest valid edge value.
    Every series (row) must contain at least one valid entry.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if values.shape != valid.shape:
        raise ValueError("values and valid must share shape")
    if not valid.any(axis=-1).all():
        raise ValueError("cannot fill a series with zero valid entries")

    t = np.arange(values.shape[-1])
    # Index of the nearest valid entry at or before / at or after each step.
    idx = np.where(valid, t, -1)
    prev = np.maximum.accumulate(idx, axis=-1)
    idx = np.where(valid, t, values.shape[-1])
    nxt = np.flip(np.minimum.accumulate(np.flip(idx, axis=-1), axis=-1), axis=-1)

    lead = prev < 0          # before the first valid entry
    trail = nxt >= values.shape[-1]
    prev_c = np.where(lead, nxt, prev)
    nxt_c = np.where(trail, prev_c, nxt)

    v_prev = np.take_along_axis(values, prev_c, axis=-1)
    v_next = np.take_along_axis(values, nxt_c, axis=-1)
    span = (nxt_c - prev_c).astype(np.float64)
    frac = np.where(span > 0, (t - prev_c) / np.where(span > 0, span, 1.0), 0.0)
    filled = v_prev + (v_next - v_prev) * frac
    filled = np.where(lead, v_next, filled)
    filled = np.where(trail & ~lead, v_prev, filled)
    return np.where(valid, values, filled)


def interpolate_gaps(series: TimeSeries) -> TimeSeries:
    """Gap-fill one series; result is fully valid."""
    filled = fill_gaps_grid(series.values, series.valid)
    return TimeSeries(filled, np.ones_like(series.valid), series.grid)


def savgol_coefficients(window: int = SAVGOL_WINDOW, order: int = SAVGOL_ORDER) -> np.ndarray:
    """Least-squares smoothing kernel for the centered window."""
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    design = np.vander(x, order + 1, increasing=True)
    # Row of the projection matrix that evaluates the fit at the center.
    coeffs = np.linalg.pinv(design)[0]
    return coeffs


def savgol_smooth(values: np.ndarray) -> np.ndarray:
    """Order-3, window-5 Savitzky-Golay smoothing with mirrored edges."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] < SAVGOL_WINDOW:
        raise ValueError(f"need at least {SAVGOL_WINDOW} timesteps to smooth")
    return savgol_filter(values, SAVGOL_WINDOW, SAVGOL_ORDER, axis=-1, mode="mirror")


def savgol_grid(values: np.ndarray, axis: int) -> np.ndarray:
    """Savitzky-Golay smoothing of a dense array along ``axis``."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[axis] < SAVGOL_WINDOW:
        raise ValueError(f"need at least {SAVGOL_WINDOW} timesteps to smooth")
    kernel = savgol_coefficients()
    return convolve1d(values, kernel, axis=axis, mode="mirror")


def cubic_spline(times, values):
    """Natural cubic spline evaluator through strictly increasing knots.

    Interpolates every knot exactly; evaluation outside the knot range
    clamps to the end values.  Two knots degenerate to a straight segment.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.ndim != 1 or times.shape != values.shape:
        raise ValueError("times and values must be matching 1-D arrays")
    if len(times) < 2:
        raise ValueError("need at least 2 knots")
    if np.any(np.diff(times) <= 0):
        raise ValueError("knots must be strictly increasing (no duplicates)")

    lo, hi = times[0], times[-1]
    if len(times) == 2:
        slope = (values[1] - values[0]) / (times[1] - times[0])

        def evaluate(x):
            x = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
            return values[0] + slope * (x - times[0])
    else:
        spline = CubicSpline(times, values, bc_type="natural")

        def evaluate(x):
            x = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
            return spline(x)

    return evaluate


def percentile(values, q, valid=None):
    """Linear-interpolation percentile over the valid entries.

    Uses the rank = q/100 * (n-1) definition over the sorted values.
    """
    values = np.asarray(values, dtype=np.float64)
    if valid is not None:
        values = values[np.asarray(valid, dtype=bool)]
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise ValueError("percentile of an empty series")
    return float(np.percentile(values, q))


def _day_of_grid(month: int, day: int) -> int:
    """Days elapsed from June 1 to the given month/day, non-leap counts."""
    offset = 0
    m = 6
    while m != month:
        offset += _MONTH_DAYS[m]
        m = m % 12 + 1
    return offset + (day - 1)


def season_window(grid: TimeGrid, kind: str) -> SeasonWindow:
    """Timestep window overlapping the named calendar season.

    ``dry`` is December 1 to April 1; ``rainy`` is June 1 to October 1.  A
    timestep t spans days [10t, 10t+10) from the June 1 anchor; the window
    holds every timestep whose span overlaps the season interval.
    """
    if not grid.is_standard_year():
        raise ValueError("season windows require the June-1, 10-day, 36-step grid")
    if kind == "dry":
        start = _day_of_grid(12, 1)
        end = _day_of_grid(4, 1)
    elif kind == "rainy":
        start = _day_of_grid(6, 1)
        end = _day_of_grid(10, 1)
    else:
        raise ValueError(f"unknown season kind: {kind!r}")

    step = grid.step_days
    t = np.arange(grid.timesteps)
    overlaps = (t * step + step > start) & (t * step < end)
    idx = np.flatnonzero(overlaps)
    if idx.size == 0:
        raise ValueError(f"season {kind!r} overlaps no timestep")
    return SeasonWindow(kind, int(idx[0]), int(idx[-1]))


def random_shift(values: np.ndarray, shift: int) -> np.ndarray:
    """Shift a series by ``shift`` steps, replicating the retained edge value
    into vacated positions.  Positive shifts move values to later indices."""
    if abs(shift) > MAX_SHIFT:
        raise ValueError(f"|shift| must be <= {MAX_SHIFT}")
    values = np.asarray(values)
    t = np.arange(values.shape[-1])
    src = np.clip(t - shift, 0, values.shape[-1] - 1)
    return values[..., src]


def draw_shift(rng: np.random.Generator) -> int:
    """Uniform draw from the 7 shifts {-3..+3}."""
    return int(rng.integers(-MAX_SHIFT, MAX_SHIFT + 1))


def draw_shifts(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=n)


def shift_batch(features: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Apply per-sample shifts to an (N, L, T) batch."""
    features = np.asarray(features)
    n, _, t = features.shape
    src = np.clip(np.arange(t)[None, :] - np.asarray(shifts)[:, None], 0, t - 1)
    return np.take_along_axis(features, src[:, None, :], axis=2)


def standardize(values: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ValueError("std must be positive")
    return (np.asarray(values, dtype=np.float64) - mean) / std


def fit_standardizer(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scalar mean/std per feature layer over all values of an (N, L, T) set.

    Raises on a constant layer (zero spread cannot be standardized).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError("expected an (N, L, T) feature array")
    mean = features.mean(axis=(0, 2))
    std = features.std(axis=(0, 2))
    if np.any(std <= 0):
        bad = np.flatnonzero(std <= 0)
        raise ValueError(f"constant feature layer(s) {bad.tolist()}: std is zero")
    return mean, std


def standardize_batch(features: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Apply per-layer standardization to an (N, L, T) batch."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (np.asarray(features, dtype=np.float64) - mean[None, :, None]) / std[None, :, None]
