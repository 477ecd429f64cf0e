"""Regional phenology characterization by temporal mixture modeling.

A phenology cube (P pixels x T timesteps of vegetation index) is transformed
into principal-component space, archetypal endmember timeseries are selected
(manually or by a hull-extremes heuristic), and every pixel is expressed as
an unconstrained least-squares combination of the endmembers, with the
root-mean-square residual retained for error accounting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

DEFAULT_ENDMEMBER_NAMES = ("single_cycle", "evergreen", "double_cycle", "non_vegetated")


@dataclass
class PCBasis:
    mean: np.ndarray            # (T,)
    components: np.ndarray      # (T, K), orthonormal columns
    eigenvalues: np.ndarray     # (K,), non-increasing
    explained_fraction: np.ndarray  # (K,)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Project (N, T) rows onto the component space -> (N, K) scores."""
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components


@dataclass
class TemporalEndmembers:
    matrix: np.ndarray          # (T, M) endmember timeseries as columns
    names: list[str]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise ValueError("endmember matrix must be (T, M) with M >= 1")
        if not np.isfinite(self.matrix).all():
            raise ValueError("endmember matrix must be finite")
        if len(self.names) != self.matrix.shape[1]:
            raise ValueError("one name per endmember required")
        if np.linalg.matrix_rank(self.matrix) < self.matrix.shape[1]:
            raise ValueError("endmember matrix is rank deficient")


@dataclass
class UnmixResult:
    fractions: np.ndarray       # (P, M), unconstrained
    rms: np.ndarray             # (P,), ||x - E f|| / sqrt(T)


def pc_transform(cube: np.ndarray, k: int) -> tuple[PCBasis, np.ndarray]:
    """Mean-centered SVD of a (P, T) cube; returns the basis and (P, K) scores.

    Sign convention: each component's largest-magnitude entry is positive.
    Eigenvalues are the variances of the scores along each component.
    """
    x = np.asarray(cube, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("cube must be (P, T)")
    p, t = x.shape
    if not 1 <= k <= min(p, t):
        raise ValueError(f"need 1 <= K <= min(P, T) = {min(p, t)}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 0:
        raise ValueError("degenerate cube: zero variance")
    components = vt[:k].T
    # Make the dominant entry of each component positive.
    flip = np.sign(components[np.abs(components).argmax(axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    components = components * flip
    eigenvalues = (s[:k] ** 2) / p
    total_var = centered.var(axis=0).sum()
    explained = eigenvalues / total_var
    scores = centered @ components
    return PCBasis(mean, components, eigenvalues, explained), scores


def select_endmembers(cube: np.ndarray, scores: np.ndarray, strategy,
                      names=None) -> TemporalEndmembers:
    """Pick endmember pixels and return their raw timeseries as columns.

    ``strategy`` is either ``("manual", [pixel indices])`` or
    ``("hull", M, dims)``.  The hull heuristic greedily picks the pixels
    that maximize pairwise Euclidean separation in the first ``dims`` score
    dimensions, seeded by the max-norm pixel.
    """
    cube = np.asarray(cube, dtype=np.float64)
    kind = strategy[0]
    if kind == "manual":
        idx = list(strategy[1])
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate endmember pixel indices")
        if max(idx) >= cube.shape[0] or min(idx) < 0:
            raise ValueError("endmember index out of range")
    elif kind == "hull":
        m, dims = int(strategy[1]), int(strategy[2])
        if m > cube.shape[0]:
            raise ValueError("cannot select more endmembers than pixels")
        pts = np.asarray(scores, dtype=np.float64)[:, :dims]
        idx = [int(np.argmax((pts ** 2).sum(axis=1)))]
        while len(idx) < m:
            d = np.linalg.norm(pts[:, None, :] - pts[None, idx, :], axis=2)
            mindist = d.min(axis=1)
            mindist[idx] = -np.inf
            idx.append(int(np.argmax(mindist)))
    else:
        raise ValueError(f"unknown selection strategy {kind!r}")
    if names is None:
        names = (list(DEFAULT_ENDMEMBER_NAMES[:len(idx)])
                 if len(idx) <= len(DEFAULT_ENDMEMBER_NAMES)
                 else [f"em{i}" for i in range(len(idx))])
    return TemporalEndmembers(cube[idx].T, list(names))


def unmix_lsq(cube: np.ndarray, endmembers: TemporalEndmembers) -> UnmixResult:
    """Per-pixel unconstrained least squares x ~ E f, solved through QR.

    Fractions carry no non-negativity or sum-to-one constraint; rms is
    ||x - E f||_2 / sqrt(T) so error thresholds are amplitude-comparable
    across grid lengths.
    """
    x = np.asarray(cube, dtype=np.float64)
    e = endmembers.matrix
    t, m = e.shape
    if x.shape[1] != t:
        raise ValueError("cube timesteps do not match endmembers")
    if t < m:
        raise ValueError("need at least as many timesteps as endmembers")
    q, r = np.linalg.qr(e)
    if np.abs(np.diag(r)).min() < 1e-10 * np.abs(np.diag(r)).max():
        raise ValueError("endmember matrix is numerically rank deficient")
    fractions = solve_triangular(r, q.T @ x.T).T
    residual = x - fractions @ e.T
    rms = np.linalg.norm(residual, axis=1) / np.sqrt(t)
    return UnmixResult(fractions, rms)


def rms_cdf(result: UnmixResult, thresholds=None) -> dict:
    """Empirical CDF of the rms distribution at given thresholds plus deciles.

    CDF(x) = fraction of pixels with rms <= x.
    """
    rms = np.asarray(result.rms, dtype=np.float64)
    if rms.size == 0:
        raise ValueError("empty unmix result")
    out_thresholds = []
    for thr in (thresholds or []):
        out_thresholds.append({"rms": float(thr),
                               "fraction": float(np.mean(rms <= thr))})
    deciles = {f"p{q}": float(np.percentile(rms, q)) for q in range(10, 100, 10)}
    return {"thresholds": out_thresholds, "deciles": deciles,
            "fraction_below_0.10": float(np.mean(rms <= 0.10))}
