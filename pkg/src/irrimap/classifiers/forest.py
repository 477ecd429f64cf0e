"""Random forest classifier: fit via scikit-learn, predict from plain arrays.

The fitted ensemble is flattened to per-tree node arrays (children, feature,
threshold, leaf class frequencies) so prediction and on-disk persistence
need no scikit-learn objects, and the probability is by construction the
mean of per-tree leaf class frequencies.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier

N_TREES = 1000
MIN_LEAF = 5


@dataclass
class ForestTree:
    feature: np.ndarray       # (nodes,) int, -2 at leaves (sklearn convention)
    threshold: np.ndarray     # (nodes,) float
    left: np.ndarray          # (nodes,) int
    right: np.ndarray         # (nodes,) int
    leaf_p1: np.ndarray       # (nodes,) float, class-1 frequency at leaves

    def predict_p1(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            at_leaf = self.left[node] < 0
            if at_leaf.all():
                break
            f = np.maximum(self.feature[node], 0)
            go_left = x[np.arange(x.shape[0]), f] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(at_leaf, node, nxt)
        return self.leaf_p1[node]


@dataclass
class ForestModel:
    trees: list[ForestTree] = field(default_factory=list)
    constant_p1: float | None = None    # set for single-class training data

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.constant_p1 is not None:
            return np.full(x.shape[0], self.constant_p1)
        acc = np.zeros(x.shape[0])
        for tree in self.trees:
            acc += tree.predict_p1(x)
        return acc / len(self.trees)

    def per_tree_proba(self, x: np.ndarray) -> np.ndarray:
        """(n_trees, N) class-1 probability per tree, for verification."""
        x = np.asarray(x, dtype=np.float64)
        return np.stack([t.predict_p1(x) for t in self.trees])


def fit_random_forest(x: np.ndarray, y: np.ndarray, w: np.ndarray,
                      n_trees: int = N_TREES, min_leaf: int = MIN_LEAF,
                      seed: int = 0, n_jobs: int = 1) -> ForestModel:
    """Bootstrap forest: Gini splits, sqrt(d) candidate features, min-leaf 5.

    Sample weights are honored during resampling and impurity computation.
    Single-class data yields a constant predictor with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    classes = np.unique(y)
    if classes.size < 2:
        warnings.warn("single-class training data: fitting a constant predictor")
        return ForestModel(constant_p1=float(classes[0]))

    clf = RandomForestClassifier(
        n_estimators=n_trees, criterion="gini", max_features="sqrt",
        min_samples_leaf=min_leaf, bootstrap=True, random_state=seed,
        n_jobs=n_jobs)
    clf.fit(x, y, sample_weight=w)

    class_one = int(np.flatnonzero(clf.classes_ == 1)[0])
    trees = []
    for est in clf.estimators_:
        t = est.tree_
        counts = t.value[:, 0, :]                     # weighted class counts
        totals = counts.sum(axis=1)
        p1 = np.where(totals > 0, counts[:, class_one] / np.maximum(totals, 1e-300), 0.0)
        trees.append(ForestTree(
            feature=t.feature.astype(np.int64).copy(),
            threshold=t.threshold.astype(np.float64).copy(),
            left=t.children_left.astype(np.int64).copy(),
            right=t.children_right.astype(np.int64).copy(),
            leaf_p1=p1.astype(np.float64)))
    return ForestModel(trees=trees)
