"""Squared-error gradient boosting over depth-limited regression trees."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import FitError
from ..geo import SpatialDataset
from .base import PredictorModel, register

LEAF = -1


@dataclass
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf holding ``value[i]``.

    Samples with ``x[feature] <= threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] != LEAF
        while np.any(active):
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def as_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["feature"], dtype=int), np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["left"], dtype=int), np.asarray(d["right"], dtype=int),
                   np.asarray(d["value"], dtype=float))


def _best_split(X, r, rows, sorted_cols, in_node, min_samples):
    """Largest SSE reduction over all axis-aligned thresholds for one node.

    Ties keep the lowest feature index, then the lowest threshold.
    """
    n = len(rows)
    total = r[rows].sum()
    best = (0.0, None, None)
    if n < 2 * min_samples:
        return best
    base = total * total / n
    for f, order in enumerate(sorted_cols):
        idx = order[in_node[order]]
        xs = X[idx, f]
        cs = np.cumsum(r[idx])[:-1]
        n_left = np.arange(1, n)
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_samples) & (n - n_left >= min_samples)
        if not valid.any():
            continue
        gain = cs ** 2 / n_left + (total - cs) ** 2 / (n - n_left) - base
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            best = (float(gain[i]), f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def build_tree(X, r, max_depth, min_samples=1, sorted_cols=None) -> Tree:
    """Greedy variance-reduction tree; leaves hold the mean residual."""
    if sorted_cols is None:
        sorted_cols = [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]
    feature, threshold, left, right, value = [], [], [], [], []
    in_node = np.zeros(len(X), dtype=bool)
    scale = max(float(np.sum(r * r)), 1e-300)

    def grow(rows, depth):
        node = len(feature)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(r[rows].mean()))
        if depth >= max_depth or len(rows) < 2:
            return node
        in_node[:] = False
        in_node[rows] = True
        gain, f, thr = _best_split(X, r, rows, sorted_cols, in_node, min_samples)
        # ignore splits whose gain is rounding noise
        if f is None or gain <= 1e-12 * scale:
            return node
        mask = X[rows, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = grow(rows[mask], depth + 1)
        right[node] = grow(rows[~mask], depth + 1)
        return node

    grow(np.arange(len(X)), 0)
    return Tree(np.array(feature, dtype=int), np.array(threshold), np.array(left, dtype=int),
                np.array(right, dtype=int), np.array(value))


class GbtModel(PredictorModel):
    """Gradient-boosted regression trees on the feature matrix.

    ``prediction = base_score + learning_rate * sum(tree leaf values)`` with
    ``base_score`` the training mean. Set ``use_coords`` to append the
    record coordinates to the features.
    """

    kind = "gbt"
    uses_features = True

    def __init__(self, n_trees=100, max_depth=4, learning_rate=0.1, min_samples=5,
                 use_coords=False):
        super().__init__()
        self.n_trees = int(n_trees)
        self.max_depth = int(max_depth)
        self.learning_rate = float(learning_rate)
        self.min_samples = int(min_samples)
        self.use_coords = bool(use_coords)
        if self.max_depth < 0 or self.n_trees < 0 or self.min_samples < 1:
            raise FitError("invalid boosting hyperparameters")
        self.trees: list[Tree] = []
        self.base_score = 0.0

    def get_params(self):
        return {"n_trees": self.n_trees, "max_depth": self.max_depth,
                "learning_rate": self.learning_rate, "min_samples": self.min_samples,
                "use_coords": self.use_coords}

    def _matrix(self, ds: SpatialDataset) -> np.ndarray:
        if self.use_coords:
            return np.hstack([ds.features, ds.coords])
        return np.asarray(ds.features)

    def _fit(self, train):
        X = self._matrix(train)
        y = np.asarray(train.target)
        self.base_score = float(y.mean())
        pred = np.full(len(y), self.base_score)
        sorted_cols = [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]
        self.trees = []
        for _ in range(self.n_trees):
            tree = build_tree(X, y - pred, self.max_depth, self.min_samples, sorted_cols)
            self.trees.append(tree)
            pred = pred + self.learning_rate * tree.predict(X)
        self.train_rmse_ = float(np.sqrt(np.mean((y - pred) ** 2)))

    def staged_predict(self, queries: SpatialDataset):
        """Predictions after each boosting round (round 0 is the base score)."""
        self.validate_queries(queries)
        X = self._matrix(queries)
        pred = np.full(len(X), self.base_score)
        yield pred.copy()
        for tree in self.trees:
            pred = pred + self.learning_rate * tree.predict(X)
            yield pred.copy()

    def _predict(self, queries):
        X = self._matrix(queries)
        pred = np.full(len(X), self.base_score)
        for tree in self.trees:
            pred += self.learning_rate * tree.predict(X)
        return pred

    def _state(self):
        return {"base_score": self.base_score, "trees": [t.as_dict() for t in self.trees]}

    def _set_state(self, state):
        self.base_score = float(state["base_score"])
        self.trees = [Tree.from_dict(t) for t in state["trees"]]


def train_gbt(train: SpatialDataset, n_trees=100, max_depth=4, learning_rate=0.1,
              min_samples=5, use_coords=False) -> GbtModel:
    return GbtModel(n_trees, max_depth, learning_rate, min_samples, use_coords).fit(train)


register("gbt")(GbtModel)
