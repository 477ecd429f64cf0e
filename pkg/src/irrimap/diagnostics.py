"""Transferability and explainability statistics.

Two-sample Kolmogorov-Smirnov distances composed across principal-component
dimensions quantify how far apart regions' sample distributions sit; an
ordinary least-squares regression with exact t-distribution p-values ties
region inclusion to withheld-region F1; gradient-weighted activations of the
encoder output yield per-timestep prediction importances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import timeseries as ts
from .classifiers import TrainedModel, network
from .unmix import PCBasis, pc_transform

KS_DIMS = 10


@dataclass
class EmpiricalCDF:
    values: np.ndarray          # sorted

    def __init__(self, values):
        values = np.sort(np.asarray(values, dtype=np.float64))
        if values.size == 0:
            raise ValueError("empty sample")
        self.values = values

    def __call__(self, x) -> np.ndarray:
        return np.searchsorted(self.values, x, side="right") / self.values.size


def ks_1d(a, b) -> float:
    """Exact two-sample KS statistic: sup over the merged support of |F1-F2|."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("KS statistic needs two nonempty samples")
    support = np.concatenate([a, b])
    fa = EmpiricalCDF(a)
    fb = EmpiricalCDF(b)
    return float(np.max(np.abs(fa(support) - fb(support))))


def ks_pseudo_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean composition of per-dimension KS statistics of two (N, K) sets."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("score sets disagree on dimensionality")
    total = 0.0
    for k in range(a.shape[1]):
        total += ks_1d(a[:, k], b[:, k]) ** 2
    return float(np.sqrt(total))


@dataclass
class KSReport:
    regions: list[str]
    matrix: np.ndarray          # (R, R) symmetric, zero diagonal
    row_means: np.ndarray       # (R,), excluding the diagonal

    def as_dict(self) -> dict:
        return {"regions": self.regions,
                "matrix": self.matrix.tolist(),
                "row_means": self.row_means.tolist()}


def region_similarity_matrix(series_by_region: dict[str, np.ndarray],
                             basis: PCBasis | None = None,
                             dims: int = KS_DIMS) -> KSReport:
    """Pairwise pseudo-1D KS over the first ``dims`` PC scores per region.

    The basis is fit on the pooled samples when not supplied.  Row means
    exclude the zero diagonal, mirroring the report's Mean column.
    """
    regions = sorted(series_by_region)
    for name in regions:
        if np.asarray(series_by_region[name]).shape[0] < 2:
            raise ValueError(f"region {name} has fewer than 2 samples")
    if basis is None:
        pooled = np.concatenate([series_by_region[name] for name in regions])
        basis, _ = pc_transform(pooled, min(dims, pooled.shape[1]))
    scores = {name: basis.transform(series_by_region[name])[:, :dims]
              for name in regions}
    r = len(regions)
    matrix = np.zeros((r, r))
    for i in range(r):
        for j in range(i + 1, r):
            d = ks_pseudo_1d(scores[regions[i]], scores[regions[j]])
            matrix[i, j] = matrix[j, i] = d
    if r > 1:
        row_means = matrix.sum(axis=1) / (r - 1)
    else:
        row_means = np.zeros(r)
    return KSReport(regions, matrix, row_means)


def _betacf(a: float, b: float, x: float, tol: float = 1e-10,
            max_iter: int = 500) -> float:
    """Continued fraction for the incomplete beta function (Lentz method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t_stat: float, dof: float) -> float:
    """Two-sided survival P(|T| >= t) for Student's t with ``dof`` degrees."""
    x = dof / (dof + t_stat * t_stat)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


@dataclass
class OLSReport:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    t_statistics: np.ndarray
    p_values: np.ndarray
    r_squared: float
    n: int
    column_names: list[str]

    def as_dict(self) -> dict:
        return {"columns": self.column_names,
                "coefficients": self.coefficients.tolist(),
                "standard_errors": self.standard_errors.tolist(),
                "t_statistics": self.t_statistics.tolist(),
                "p_values": self.p_values.tolist(),
                "r_squared": self.r_squared, "n": self.n}


def ols_fit(x: np.ndarray, y: np.ndarray, column_names=None,
            intercept: bool = True) -> OLSReport:
    """OLS via QR with classical standard errors and two-sided t p-values.

    Raises on rank deficiency, naming the offending columns.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    names = list(column_names) if column_names else [f"x{i}" for i in range(p)]
    if intercept:
        x = np.column_stack([np.ones(n), x])
        names = ["intercept"] + names
    cols = x.shape[1]
    if n <= cols:
        raise ValueError(f"need more than {cols} observations, got {n}")

    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    bad = diag < 1e-10 * max(diag.max(), 1.0)
    if bad.any():
        offenders = [names[i] for i in np.flatnonzero(bad)]
        raise ValueError(f"design matrix is rank deficient; collinear columns: {offenders}")
    beta = np.linalg.solve(r, q.T @ y)
    residuals = y - x @ beta
    dof = n - cols
    sigma2 = residuals @ residuals / dof
    rinv = np.linalg.solve(r, np.eye(cols))
    cov = sigma2 * rinv @ rinv.T
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = np.where(se > 0, beta / se, np.inf)
    p_values = np.array([t_sf(abs(t), dof) if np.isfinite(t) else 0.0
                         for t in t_stats])
    ss_tot = float(((y - y.mean()) ** 2).sum()) if intercept else float((y ** 2).sum())
    ss_res = float(residuals @ residuals)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return OLSReport(beta, se, t_stats, p_values, r2, n, names)


def sweep_design_matrix(rows, region_names) -> tuple[np.ndarray, np.ndarray]:
    """Region-inclusion indicators X and withheld-region F1 responses y."""
    x = np.zeros((len(rows), len(region_names)))
    y = np.zeros(len(rows))
    for i, row in enumerate(rows):
        for name in row.subset:
            x[i, region_names.index(name)] = 1.0
        y[i] = row.f1
    return x, y


@dataclass
class SaliencyMap:
    importances: np.ndarray     # (N, T) in [0, 1]
    flags: np.ndarray           # (N,) bool, True when the raw map was all zero


def grad_cam(model: TrainedModel, features: np.ndarray) -> SaliencyMap:
    """Per-timestep prediction importances from the saliency network variant.

    With encoder output A (T x D) and alpha_k the time-mean of
    d(logit)/dA[:, k], importance(t) = max(0, sum_k alpha_k * A[t, k]),
    min-max normalized to [0, 1] per sample.
    """
    if model.variant != "transformer" or model.network_config is None:
        raise ValueError("saliency maps need a transformer model")
    if model.network_config.penultimate:
        raise ValueError("saliency maps need the no-penultimate network variant")
    x = model.standardize(np.asarray(features, dtype=np.float64))
    a, dlogit_da = network.encoder_output_and_logit_grad(
        model.payload, x, model.network_config)
    return saliency_from_encoder(a, dlogit_da)


def saliency_from_encoder(a: np.ndarray, dlogit_da: np.ndarray) -> SaliencyMap:
    """Gradient-weighted activation: importance(t) = relu(sum_k alpha_k A[t,k])
    with alpha the time-mean of the logit gradient, min-max normalized."""
    alpha = np.asarray(dlogit_da).mean(axis=1)           # (N, D)
    raw = np.maximum((np.asarray(a) * alpha[:, None, :]).sum(axis=2), 0.0)
    peak = raw.max(axis=1)
    flags = peak <= 0
    importances = np.where(flags[:, None], 0.0,
                           raw / np.where(peak > 0, peak, 1.0)[:, None])
    return SaliencyMap(importances, flags)


def dry_window_emphasis(saliency: SaliencyMap, grid: ts.TimeGrid) -> np.ndarray:
    """Per-sample boolean: mean dry-window importance exceeds the rest."""
    dry = ts.season_window(grid, "dry")
    sel = np.zeros(saliency.importances.shape[1], dtype=bool)
    sel[dry.lo:dry.hi + 1] = True
    inside = saliency.importances[:, sel].mean(axis=1)
    outside = saliency.importances[:, ~sel].mean(axis=1)
    return inside > outside
