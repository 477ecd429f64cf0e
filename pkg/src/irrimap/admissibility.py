"""Prediction admissibility criteria and the rule-based reference classifier.

Five conjunctive rules exclude pixels that cannot plausibly be irrigated
cropland: evergreen (10th percentile too high, or 90th:10th ratio too flat),
barren (90th percentile too low), no dry-season growth, or terrain too steep
to crop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import timeseries as ts

EVI_THRESHOLD = 0.2
RATIO_MIN = 2.0
SLOPE_MAX_PERCENT = 8.0
P10_FLOOR = 1e-6


@dataclass(frozen=True)
class AdmissibilityVerdict:
    p10_low: bool      # 10th percentile below threshold (not evergreen)
    p90_high: bool     # 90th percentile above threshold (not barren)
    dry_peak: bool     # dry-season maximum above threshold
    ratio: bool        # 90th:10th percentile ratio above 2
    slope_ok: bool     # slope below 8 percent

    @property
    def admissible(self) -> bool:
        return (self.p10_low and self.p90_high and self.dry_peak
                and self.ratio and self.slope_ok)


def evaluate_criteria(evi: np.ndarray, slope_percent: float,
                      grid: ts.TimeGrid | None = None,
                      threshold: float = EVI_THRESHOLD,
                      slope_max: float = SLOPE_MAX_PERCENT) -> AdmissibilityVerdict:
    """Evaluate the five admissibility rules on one all-valid series.

    The 10th percentile is floored at 1e-6 inside the ratio rule so
    near-zero baselines count as strongly non-evergreen.
    """
    evi = np.asarray(evi, dtype=np.float64)
    grid = grid or ts.TimeGrid(timesteps=evi.shape[-1])
    dry = ts.season_window(grid, "dry")
    p10 = np.percentile(evi, 10)
    p90 = np.percentile(evi, 90)
    dry_max = evi[dry.lo:dry.hi + 1].max()
    return AdmissibilityVerdict(
        p10_low=bool(p10 < threshold),
        p90_high=bool(p90 > threshold),
        dry_peak=bool(dry_max > threshold),
        ratio=bool(p90 / max(p10, P10_FLOOR) > RATIO_MIN),
        slope_ok=bool(slope_percent < slope_max),
    )


def reference_classify(evi: np.ndarray, slope_percent: float,
                       grid: ts.TimeGrid | None = None) -> int:
    """Rule-based classifier: irrigated iff all five criteria hold."""
    return 1 if evaluate_criteria(evi, slope_percent, grid).admissible else 0


def admissibility_grid(evi: np.ndarray, slope_percent: np.ndarray,
                       grid: ts.TimeGrid | None = None,
                       threshold: float = EVI_THRESHOLD,
                       slope_max: float = SLOPE_MAX_PERCENT) -> np.ndarray:
    """Vectorized admissibility over a (T, H, W) index layer + (H, W) slope."""
    evi = np.asarray(evi, dtype=np.float64)
    grid = grid or ts.TimeGrid(timesteps=evi.shape[0])
    dry = ts.season_window(grid, "dry")
    p10 = np.percentile(evi, 10, axis=0)
    p90 = np.percentile(evi, 90, axis=0)
    dry_max = evi[dry.lo:dry.hi + 1].max(axis=0)
    slope = np.asarray(slope_percent, dtype=np.float64)
    return ((p10 < threshold) & (p90 > threshold) & (dry_max > threshold)
            & (p90 / np.maximum(p10, P10_FLOOR) > RATIO_MIN) & (slope < slope_max))
