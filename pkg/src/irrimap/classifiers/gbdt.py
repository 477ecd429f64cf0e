"""Gradient-boosted regression trees on logistic loss with Newton leaf values.

Depth-limited trees are grown level-wise on histogram statistics (bin edges
come from midpoints between unique feature values, so duplicating a sample
and doubling its weight build identical trees).  Boosting stops early when
validation logloss has not improved for a patience window.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

MAX_ROUNDS = 1000
MAX_DEPTH = 6
SHRINKAGE = 0.1
PATIENCE = 50
MAX_BINS = 256
HESS_REG = 1e-6
PROB_CLIP = 1e-6


@dataclass
class Tree:
    feature: np.ndarray       # (nodes,) int32, -1 at leaves
    threshold: np.ndarray     # (nodes,) float64
    left: np.ndarray          # (nodes,) int32
    right: np.ndarray         # (nodes,) int32
    value: np.ndarray         # (nodes,) float64, leaf values

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            at_leaf = self.feature[node] < 0
            if at_leaf.all():
                break
            f = self.feature[node]
            go_left = x[np.arange(x.shape[0]), np.maximum(f, 0)] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(at_leaf, node, nxt)
        return self.value[node]


@dataclass
class GBDTModel:
    base_score: float
    shrinkage: float
    trees: list[Tree] = field(default_factory=list)
    best_round: int = 0
    val_logloss: list[float] = field(default_factory=list)
    train_logloss: list[float] = field(default_factory=list)

    def decision_function(self, x: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape[0], self.base_score)
        for tree in self.trees[: (len(self.trees) if n_trees is None else n_trees)]:
            out += self.shrinkage * tree.predict(x)
        return out

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision_function(x))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def _logloss(logits, y, w):
    per = np.logaddexp(0.0, logits) - y * logits
    return float((w * per).sum() / w.sum())


def _bin_features(x: np.ndarray, max_bins: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Bin each feature at midpoints between unique values.

    Edges depend only on the set of distinct values, never on row counts or
    weights, which keeps tree construction invariant under sample
    duplication vs. weight doubling.
    """
    n, d = x.shape
    bins = np.zeros((n, d), dtype=np.int32)
    edges_per_feature = []
    for j in range(d):
        uniq = np.unique(x[:, j])
        if uniq.size <= 1:
            edges = np.empty(0)
        elif uniq.size <= max_bins:
            edges = (uniq[:-1] + uniq[1:]) / 2.0
        else:
            qs = np.quantile(uniq, np.linspace(0, 1, max_bins + 1)[1:-1])
            edges = np.unique(qs)
        edges_per_feature.append(edges)
        if edges.size:
            bins[:, j] = np.searchsorted(edges, x[:, j], side="left")
    return bins, edges_per_feature


def _grow_tree(bins: np.ndarray, edges: list[np.ndarray], g: np.ndarray,
               h: np.ndarray, max_depth: int) -> Tree:
    """Level-wise histogram tree minimizing the second-order loss expansion.

    Split gain is the usual 0.5*(GL^2/HL + GR^2/HR - G^2/H) with a small
    hessian regularizer; leaves take the Newton value -G/H.
    """
    n, d = bins.shape
    n_bins = max((e.size + 1 for e in edges), default=1)
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, dtype=np.int32)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int32)
    right = np.full(max_nodes, -1, dtype=np.int32)
    value = np.zeros(max_nodes)

    node_split_bin = np.full(max_nodes, -1, dtype=np.int64)
    node_of = np.zeros(n, dtype=np.int64)      # heap index per sample
    active = {0}
    for depth in range(max_depth):
        if not active:
            break
        level_lo = 2 ** depth - 1
        n_level = 2 ** depth
        local = node_of - level_lo
        in_level = np.isin(node_of, list(active))
        next_active = set()
        # Histogram per (node, feature, bin) for g, h and counts.
        hist_size = n_level * n_bins
        best_gain = np.full(n_level, 0.0)
        best_feat = np.full(n_level, -1, dtype=np.int64)
        best_bin = np.full(n_level, -1, dtype=np.int64)
        g_tot = np.bincount(local[in_level], weights=g[in_level], minlength=n_level)
        h_tot = np.bincount(local[in_level], weights=h[in_level], minlength=n_level)
        c_tot = np.bincount(local[in_level], minlength=n_level)
        for j in range(d):
            if edges[j].size == 0:
                continue
            key = local[in_level] * n_bins + bins[in_level, j]
            hg = np.bincount(key, weights=g[in_level], minlength=hist_size).reshape(n_level, n_bins)
            hh = np.bincount(key, weights=h[in_level], minlength=hist_size).reshape(n_level, n_bins)
            hc = np.bincount(key, minlength=hist_size).reshape(n_level, n_bins)
            gl = np.cumsum(hg, axis=1)[:, :-1]
            hl = np.cumsum(hh, axis=1)[:, :-1]
            cl = np.cumsum(hc, axis=1)[:, :-1]
            gr = g_tot[:, None] - gl
            hr = h_tot[:, None] - hl
            cr = c_tot[:, None] - cl
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = 0.5 * (gl ** 2 / (hl + HESS_REG) + gr ** 2 / (hr + HESS_REG)
                              - (g_tot[:, None] ** 2) / (h_tot[:, None] + HESS_REG))
            gain[(cl < 1) | (cr < 1)] = -np.inf
            cand = np.argmax(gain, axis=1)
            cand_gain = gain[np.arange(n_level), cand]
            improves = cand_gain > best_gain + 1e-12
            best_gain = np.where(improves, cand_gain, best_gain)
            best_feat = np.where(improves, j, best_feat)
            best_bin = np.where(improves, cand, best_bin)

        for node in sorted(active):
            li = node - level_lo
            if best_feat[li] < 0 or c_tot[li] < 2:
                value[node] = -g_tot[li] / (h_tot[li] + HESS_REG)
                continue
            j = int(best_feat[li])
            feature[node] = j
            node_split_bin[node] = int(best_bin[li])
            threshold[node] = edges[j][int(best_bin[li])]
            left[node] = 2 * node + 1
            right[node] = 2 * node + 2
            next_active.update((2 * node + 1, 2 * node + 2))

        # Route samples of split nodes down one level (bin <= split bin -> left).
        splittable = feature[node_of] >= 0
        if splittable.any():
            f = feature[node_of[splittable]]
            go_left = (bins[splittable, f]
                       <= node_split_bin[node_of[splittable]])
            node_of[splittable] = np.where(go_left, 2 * node_of[splittable] + 1,
                                           2 * node_of[splittable] + 2)
        active = next_active

    # Any still-active nodes at the depth cap become leaves.
    for node in sorted(active):
        sel = node_of == node
        gs = g[sel].sum()
        hs = h[sel].sum()
        value[node] = -gs / (hs + HESS_REG)

    used = 2 ** (max_depth + 1) - 1
    return Tree(feature[:used], threshold[:used], left[:used], right[:used], value[:used])


def fit_gbdt(x: np.ndarray, y: np.ndarray, w: np.ndarray,
             x_val: np.ndarray, y_val: np.ndarray, w_val: np.ndarray,
             max_rounds: int = MAX_ROUNDS, max_depth: int = MAX_DEPTH,
             shrinkage: float = SHRINKAGE, patience: int = PATIENCE,
             max_bins: int = MAX_BINS) -> GBDTModel:
    """Boost up to ``max_rounds`` trees with early stopping on validation loss.

    Sample weights multiply the per-sample gradients and hessians.  The
    returned model is truncated to the best validation round.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    w_val = np.asarray(w_val, dtype=np.float64)
    classes = np.unique(y)
    if classes.size < 2:
        warnings.warn("single-class training data: fitting a constant predictor")

    p0 = np.clip((w * y).sum() / w.sum(), PROB_CLIP, 1 - PROB_CLIP)
    base = float(np.log(p0 / (1 - p0)))
    model = GBDTModel(base_score=base, shrinkage=shrinkage)

    bins, edges = _bin_features(x, max_bins)
    f_train = np.full(x.shape[0], base)
    f_val = np.full(x_val.shape[0], base)
    best_loss = np.inf
    best_round = 0
    for rnd in range(1, max_rounds + 1):
        p = _sigmoid(f_train)
        g = w * (p - y)
        h = np.maximum(w * p * (1 - p), 1e-16)
        tree = _grow_tree(bins, edges, g, h, max_depth)
        model.trees.append(tree)
        f_train += shrinkage * tree.predict(x)
        f_val += shrinkage * tree.predict(x_val)
        model.train_logloss.append(_logloss(f_train, y, w))
        val_loss = _logloss(f_val, y_val, w_val)
        model.val_logloss.append(val_loss)
        if val_loss < best_loss - 1e-12:
            best_loss = val_loss
            best_round = rnd
        elif rnd - best_round >= patience:
            break
    model.best_round = best_round if best_round > 0 else 1
    model.trees = model.trees[: model.best_round]
    return model
