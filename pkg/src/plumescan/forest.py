"""
Random forest of CART trees (Gini impurity, bootstrap samples, sqrt(p)
candidate features per node) for the plume/artifact decision.

Class 1 is "plume", class 0 is "artifact". Prediction averages leaf class
probabilities over trees; an exact 0.5 tie resolves to artifact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .qnd import FEATURE_ORDER

MODEL_VERSION = 1
CLASS_NAMES = ("artifact", "plume")


class ForestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes) leaf class probabilities

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64).reshape(len(d["feature"]), -1),
        )


@dataclass(frozen=True, eq=False)
class RandomForestModel:
    trees: tuple[Tree, ...]
    n_classes: int = 2
    max_depth: int = 12
    seed: int = 0
    feature_names: tuple[str, ...] = FEATURE_ORDER
    oob_accuracy: float | None = field(default=None)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ForestError(f"expected {self.n_features} features, got {X.shape[1]}")
        acc = np.zeros((len(X), self.n_classes))
        for t in self.trees:
            acc += t.predict_proba(X)
        return acc / len(self.trees)

    def to_json(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "feature_order": list(self.feature_names),
            "n_classes": self.n_classes,
            "max_depth": self.max_depth,
            "seed": self.seed,
            "oob_accuracy": self.oob_accuracy,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, d: dict) -> "RandomForestModel":
        if d.get("version") != MODEL_VERSION:
            raise ForestError(f"unsupported model version {d.get('version')!r}")
        return cls(
            tuple(Tree.from_json(t) for t in d["trees"]),
            int(d.get("n_classes", 2)),
            int(d["max_depth"]),
            int(d["seed"]),
            tuple(d["feature_order"]),
            d.get("oob_accuracy"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RandomForestModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _best_split(X, Y, idx, feats):
    """Lowest weighted Gini over candidate features; None if no split helps."""
    n = len(idx)
    counts = Y[idx].sum(axis=0)
    parent = 1.0 - np.sum((counts / n) ** 2)
    best = (parent - 1e-12, None, None)
    for f in feats:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        cum = np.cumsum(Y[idx][order], axis=0)[:-1]
        ok = xs[:-1] < xs[1:]
        if not ok.any():
            continue
        nl = np.arange(1, n, dtype=np.float64)[:, None]
        nr = n - nl
        gl = 1.0 - np.sum((cum / nl) ** 2, axis=1)
        gr = 1.0 - np.sum(((counts - cum) / nr) ** 2, axis=1)
        imp = (nl[:, 0] * gl + nr[:, 0] * gr) / n
        imp = np.where(ok, imp, np.inf)
        j = int(np.argmin(imp))
        if imp[j] < best[0]:
            best = (imp[j], int(f), 0.5 * (xs[j] + xs[j + 1]))
    return best[1], best[2]


def _grow_tree(X, Y, idx, max_depth, n_try, rng) -> Tree:
    n_feat = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(None)
        return len(feature) - 1

    root = new_node()
    stack = [(root, idx, 0)]
    while stack:
        node, rows, depth = stack.pop()
        counts = Y[rows].sum(axis=0)
        value[node] = counts / counts.sum()
        if depth >= max_depth or len(rows) < 2 or np.count_nonzero(counts) < 2:
            continue
        feats = rng.choice(n_feat, size=n_try, replace=False)
        f, thr = _best_split(X, Y, rows, feats)
        if f is None:
            continue
        go_left = X[rows, f] <= thr
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, thr, lnode, rnode
        stack.append((rnode, rows[~go_left], depth + 1))
        stack.append((lnode, rows[go_left], depth + 1))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.vstack(value),
    )


def rf_train(X, y, n_trees: int = 200, max_depth: int = 12, seed: int = 0,
             feature_names=FEATURE_ORDER) -> RandomForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ForestError("X must be (n, p) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ForestError("non-finite features")
    if len(np.unique(y)) < 2:
        raise ForestError("training data must contain at least two classes")
    if y.min() < 0 or y.max() > 1:
        raise ForestError("labels must be 0 (artifact) or 1 (plume)")
    if len(feature_names) != X.shape[1]:
        feature_names = tuple(f"f{i}" for i in range(X.shape[1]))
    n, p = X.shape
    Y = np.eye(2)[y]
    n_try = max(1, int(math.sqrt(p)))
    rng = np.random.default_rng(seed)
    trees = []
    oob_sum = np.zeros((n, 2))
    oob_hits = np.zeros(n, dtype=np.int64)
    for _ in range(n_trees):
        boot = rng.integers(0, n, size=n)
        tree = _grow_tree(X, Y, boot, max_depth, n_try, rng)
        trees.append(tree)
        out = np.ones(n, dtype=bool)
        out[boot] = False
        if out.any():
            oob_sum[out] += tree.predict_proba(X[out])
            oob_hits[out] += 1
    seen = oob_hits > 0
    oob = None
    if seen.any():
        pred = (oob_sum[seen, 1] / oob_hits[seen]) > 0.5
        oob = float(np.mean(pred == (y[seen] == 1)))
    return RandomForestModel(tuple(trees), 2, max_depth, seed, tuple(feature_names), oob)


def rf_predict(model: RandomForestModel, features) -> tuple[str, float]:
    """(class name, plume probability) for one feature vector."""
    f = np.asarray(features, dtype=np.float64).ravel()
    if f.size != model.n_features:
        raise ForestError(f"expected {model.n_features} features, got {f.size}")
    prob = float(model.predict_proba(f[None, :])[0, 1])
    return ("plume" if prob > 0.5 else "artifact"), prob


def accuracy(model: RandomForestModel, X, y) -> float:
    prob = model.predict_proba(X)[:, 1]
    return float(np.mean((prob > 0.5) == (np.asarray(y) == 1)))
