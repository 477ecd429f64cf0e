"""Label curation: polygon rasterization, median-series confirmation,
Gaussian-mixture cluster cleaning, and polygon-level train/val/test splits.

Confirmation and cleaning both come down to the same 0.2 vegetation-index
threshold: an irrigated label needs a clear dry-season peak above it plus
genuine senescence below it, a non-irrigated label must stay below it
through the dry season while still greening in the rains.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import timeseries as ts
from .raster_io import Polygon, PolygonSet

EVI_THRESHOLD = 0.2
NOISE_STD_MAX = 0.15
MIN_RUN = 2            # "multiple successive" timesteps
GMM_COMPONENTS = 15
GMM_TOL = 1e-4
GMM_MAX_ITER = 200
VARIANCE_FLOOR = 1e-6
MAX_CLEAN_ITERATIONS = 10
SPLIT_RATIOS = (0.70, 0.15, 0.15)

KEEP = "keep"
DISCARD = "discard"


@dataclass
class ClusterModel:
    weights: np.ndarray          # (K,)
    means: np.ndarray            # (K, T)
    variances: np.ndarray        # (K, T), diagonal
    log_likelihood_trace: list[float]
    converged: bool


@dataclass
class ClusterVerdict:
    centroid: np.ndarray
    member_count: int
    verdict: str                 # keep | discard
    violated_rule: str | None


@dataclass
class ClusterReport:
    clusters: list[ClusterVerdict]

    @property
    def all_kept(self) -> bool:
        return all(c.verdict == KEEP for c in self.clusters)

    @property
    def member_total(self) -> int:
        return sum(c.member_count for c in self.clusters)


@dataclass
class SplitAssignment:
    by_polygon: dict[int, str]   # polygon id -> train | val | test

    def split_of(self, polygon_id: int) -> str:
        return self.by_polygon[polygon_id]


def rasterize_polygon(polygon: Polygon, height: int, width: int) -> np.ndarray:
    """Pixel (row, col) pairs whose centers fall inside by the even-odd rule.

    Ring coordinates are stack pixel coordinates with x = column and
    y = row; pixel centers sit at (col + 0.5, row + 0.5).  Holes are
    excluded automatically by even-odd crossing counts over all rings.
    """
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    px, py = np.meshgrid(xs, ys)           # (H, W)
    inside = np.zeros((height, width), dtype=bool)
    for ring in polygon.rings:
        rx, ry = ring[:, 0], ring[:, 1]
        x2, y2 = np.roll(rx, -1), np.roll(ry, -1)
        for x1, y1, xx2, yy2 in zip(rx, ry, x2, y2):
            crosses = (y1 > py) != (yy2 > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x1 + (py - y1) * (xx2 - x1) / (yy2 - y1)
            inside ^= crosses & (px < x_at)
    pixels = np.argwhere(inside)
    if pixels.size == 0:
        warnings.warn(f"polygon {polygon.id} covers no pixel centers")
    return pixels


def polygon_median_series(evi: np.ndarray, valid: np.ndarray, pixels: np.ndarray):
    """Median/std series over a polygon's member pixels plus a spline fit.

    ``evi`` is the (T, H, W) vegetation-index layer.  Per timestep the
    median and standard deviation run over the valid member values; a
    timestep with no valid member is invalid.  The natural cubic spline is
    fit through the median at valid timesteps (index coordinates).
    """
    if len(pixels) == 0:
        raise ValueError("polygon covers no pixels")
    rows, cols = pixels[:, 0], pixels[:, 1]
    member = np.asarray(evi, dtype=np.float64)[:, rows, cols]   # (T, P)
    member_ok = np.asarray(valid, dtype=bool)[:, rows, cols]
    t = member.shape[0]
    median = np.full(t, np.nan)
    std = np.full(t, np.nan)
    ok = member_ok.any(axis=1)
    for i in np.flatnonzero(ok):
        vals = member[i, member_ok[i]]
        median[i] = np.median(vals)
        std[i] = vals.std()
    knots = np.flatnonzero(ok)
    if knots.size < 2:
        raise ValueError("polygon series has fewer than 2 valid timesteps")
    spline = ts.cubic_spline(knots.astype(float), median[knots])
    return median, std, spline, ok


def _window_max(spline, window: ts.SeasonWindow, samples_per_step: int = 20) -> float:
    x = np.linspace(window.lo, window.hi,
                    (window.hi - window.lo) * samples_per_step + 1)
    return float(np.max(spline(x)))


def confirm_polygon(median: np.ndarray, std: np.ndarray, spline, class_label: int,
                    grid: ts.TimeGrid, threshold: float = EVI_THRESHOLD,
                    noise_std_max: float = NOISE_STD_MAX) -> tuple[bool, str | None]:
    """Confirm or discard one polygon against its expected class.

    Irrigated polygons need the spline maximum over the dry window above the
    threshold; non-irrigated polygons must stay at or below it in the dry
    window while peaking above it in the rainy window.  Either class is
    discarded when the mean per-timestep standard deviation signals too much
    noise to read a phenology.
    """
    mean_std = float(np.nanmean(std))
    if mean_std > noise_std_max:
        return False, "noisy polygon"
    dry_max = _window_max(spline, ts.season_window(grid, "dry"))
    rainy_max = _window_max(spline, ts.season_window(grid, "rainy"))
    if class_label == 1:
        if dry_max > threshold:
            return True, None
        return False, "no dry-season peak"
    if dry_max > threshold:
        return False, "dry-season peak"
    if rainy_max <= threshold:
        return False, "no rainy-season cycle"
    return True, None


def _kmeans_pp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: iteratively sample points far from chosen centers."""
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        probs = d2 / total
        centers.append(x[rng.choice(n, p=probs)])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    return np.stack(centers)


def _log_gaussian_diag(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """(N, K) log densities of diagonal Gaussians."""
    t = x.shape[1]
    log_det = np.log(variances).sum(axis=1)                      # (K,)
    diff2 = (x[:, None, :] - means[None, :, :]) ** 2 / variances[None, :, :]
    return -0.5 * (t * np.log(2 * np.pi) + log_det[None, :] + diff2.sum(axis=2))


def fit_gmm(samples: np.ndarray, k: int = GMM_COMPONENTS, seed: int = 0,
            tol: float = GMM_TOL, max_iter: int = GMM_MAX_ITER
            ) -> tuple[ClusterModel, np.ndarray]:
    """Diagonal-covariance EM with k-means++ init; returns hard assignments.

    Stops when the log-likelihood gain drops below ``tol`` or after
    ``max_iter`` iterations.  A cluster that empties is re-seeded from the
    sample farthest from its current mean.
    """
    x = np.asarray(samples, dtype=np.float64)
    n, t = x.shape
    if n < k:
        raise ValueError(f"need at least {k} samples to fit {k} components")
    rng = np.random.default_rng(seed)
    means = _kmeans_pp_centers(x, k, rng)
    var0 = x.var(axis=0) + VARIANCE_FLOOR
    variances = np.tile(var0, (k, 1))
    weights = np.full(k, 1.0 / k)

    trace = []
    prev_ll = -np.inf
    converged = False
    for _ in range(max_iter):
        log_prob = _log_gaussian_diag(x, means, variances) + np.log(weights)[None, :]
        log_norm = np.logaddexp.reduce(log_prob, axis=1)
        ll = float(log_norm.sum())
        trace.append(ll)
        resp = np.exp(log_prob - log_norm[:, None])

        nk = resp.sum(axis=0)
        empty = nk < 1e-10
        if empty.any():
            # Re-seed each empty cluster from the farthest sample.
            for j in np.flatnonzero(empty):
                d2 = ((x - means[j]) ** 2).sum(axis=1)
                far = int(np.argmax(d2))
                means[j] = x[far]
                variances[j] = var0
                weights[j] = 1.0 / n
            weights /= weights.sum()
            prev_ll = -np.inf
            continue

        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        sq = resp.T @ (x ** 2) / nk[:, None]
        variances = np.maximum(sq - means ** 2, VARIANCE_FLOOR)

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            converged = True
            break
        prev_ll = ll

    log_prob = _log_gaussian_diag(x, means, variances) + np.log(weights)[None, :]
    assignments = np.argmax(log_prob, axis=1)
    return ClusterModel(weights, means, variances, trace, converged), assignments


def _longest_run(mask: np.ndarray) -> int:
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def cluster_verdicts(model: ClusterModel, assignments: np.ndarray, class_label: int,
                     grid: ts.TimeGrid, threshold: float = EVI_THRESHOLD,
                     min_run: int = MIN_RUN) -> ClusterReport:
    """Keep/discard verdict per cluster centroid against the class rules.

    Irrigated clusters must show sustained growth (>= ``min_run`` successive
    values above the threshold), sustained senescence (>= ``min_run``
    successive values at or below it) and a dry-window peak; non-irrigated
    clusters must not peak above the threshold in the dry window.
    """
    dry = ts.season_window(grid, "dry")
    counts = np.bincount(assignments, minlength=len(model.weights))
    clusters = []
    for j, centroid in enumerate(model.means):
        dry_max = float(centroid[dry.lo:dry.hi + 1].max())
        verdict, rule = KEEP, None
        if class_label == 1:
            if _longest_run(centroid > threshold) < min_run:
                verdict, rule = DISCARD, "no sustained growth"
            elif _longest_run(centroid <= threshold) < min_run:
                verdict, rule = DISCARD, "no senescence"
            elif dry_max <= threshold:
                verdict, rule = DISCARD, "no dry-season peak"
        else:
            if dry_max > threshold:
                verdict, rule = DISCARD, "dry-season peak"
        clusters.append(ClusterVerdict(centroid.copy(), int(counts[j]), verdict, rule))
    return ClusterReport(clusters)


@dataclass
class CleanLog:
    iterations: list[dict] = field(default_factory=list)
    stopped_reason: str = ""


def clean_labels(samples: np.ndarray, class_label: int, grid: ts.TimeGrid,
                 seed: int = 0, k: int = GMM_COMPONENTS,
                 max_iterations: int = MAX_CLEAN_ITERATIONS,
                 threshold: float = EVI_THRESHOLD) -> tuple[np.ndarray, CleanLog]:
    """Iterative GMM cluster cleaning of one (region, class) sample set.

    Returns the boolean retention mask over the input rows plus an
    iteration log.  Loops fit -> verdicts -> drop discarded members until
    every cluster passes or the iteration cap is reached.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"need at least {k} samples for cluster cleaning")
    retained = np.ones(x.shape[0], dtype=bool)
    log = CleanLog()
    for it in range(max_iterations):
        idx = np.flatnonzero(retained)
        if idx.size < k:
            log.stopped_reason = f"fewer than {k} samples left"
            break
        model, assign = fit_gmm(x[idx], k=k, seed=seed + it)
        report = cluster_verdicts(model, assign, class_label, grid, threshold)
        log.iterations.append({
            "samples": int(idx.size),
            "cluster_sizes": [c.member_count for c in report.clusters],
            "verdicts": [c.verdict for c in report.clusters],
            "violated_rules": [c.violated_rule for c in report.clusters],
        })
        if report.all_kept:
            log.stopped_reason = "all clusters pass"
            break
        bad = {j for j, c in enumerate(report.clusters) if c.verdict == DISCARD}
        drop_local = np.isin(assign, list(bad))
        retained[idx[drop_local]] = False
        if not retained.any():
            raise ValueError("cluster cleaning discarded every sample")
    else:
        log.stopped_reason = "iteration cap reached"
    if not retained.any():
        raise ValueError("cluster cleaning discarded every sample")
    return retained, log


def split_polygons(polygons: PolygonSet | list[Polygon], ratios=SPLIT_RATIOS,
                   seed: int = 0) -> SplitAssignment:
    """Assign polygons to train/val/test, stratified per (region, class).

    Each group is shuffled with the seed and cut at largest-remainder
    boundaries so counts match the ratios as closely as integers allow.
    Groups with fewer than 3 polygons go wholly to train with a warning.
    """
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError("ratios must be three numbers summing to 1")
    groups: dict[tuple[str, str], list[int]] = {}
    for p in polygons:
        groups.setdefault((p.region, p.class_name), []).append(p.id)

    rng = np.random.default_rng(seed)
    assignment: dict[int, str] = {}
    for key in sorted(groups):
        ids = sorted(groups[key])
        if len(ids) < 3:
            warnings.warn(f"group {key} has {len(ids)} polygons; assigning all to train")
            for pid in ids:
                assignment[pid] = "train"
            continue
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        counts = _largest_remainder(len(ids), ratios)
        bounds = np.cumsum(counts)
        for i, pid in enumerate(shuffled):
            split = "train" if i < bounds[0] else ("val" if i < bounds[1] else "test")
            assignment[pid] = split
    return SplitAssignment(assignment)


def _largest_remainder(n: int, ratios: tuple[float, ...]) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    remainder = n - sum(counts)
    # Distribute leftovers by descending fractional part, ties by position.
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts
