"""Random forest classifier built from scratch.

Trees grow on bootstrap samples; each node draws a feature subset without
replacement, scores every midpoint between consecutive distinct values of
those features by Gini gain, and splits on the best (ties resolve to the
lower feature index, then the lower threshold). Growth stops at purity,
the depth cap, or too few samples. Prediction is majority voting over the
trees' leaf classes, ties to the lowest class ordinal.

Defaults follow the reference setup: 1000 trees, depth cap 50, sqrt(d)
features per split, Gini impurity, bootstrap on.

Model file: JSON with the config, canonical label order and per-tree node
arrays; children are explicit node indices, leaves store class counts.
A save -> load round trip is prediction-identical.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import MagscopeError
from .levels import CANONICAL_LABELS, N_CLASSES
from .seeding import derive_seed
from .validation import check_feature_matrix, check_labels


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 1000
    max_depth: int = 50
    min_samples_split: int = 2
    features_per_split: int | str = "sqrt"
    bootstrap: bool = True
    seed: int = 42

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_split < 2:
            raise ValueError("n_trees and max_depth must be >= 1, min_samples_split >= 2")

    def resolve_features(self, d: int) -> int:
        if self.features_per_split == "sqrt":
            return max(1, int(math.isqrt(d)))
        k = int(self.features_per_split)
        if not 1 <= k <= d:
            raise ValueError(f"features_per_split {k} outside [1, {d}]")
        return k


def _gini(counts: np.ndarray, total: np.ndarray | float) -> np.ndarray | float:
    frac = counts / np.maximum(total, 1)
    return 1.0 - np.sum(frac * frac, axis=-1)


def gini_gain(parent: np.ndarray, left: np.ndarray, right: np.ndarray) -> float:
    """Impurity decrease of a split; 0 for pure parents and degenerate splits."""
    parent = np.asarray(parent, dtype=np.int64)
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    if np.any(left < 0) or np.any(right < 0) or not np.array_equal(left + right, parent):
        raise ValueError("left + right must equal parent, component-wise and non-negative")
    n = parent.sum()
    if n < 2:
        raise ValueError("parent must hold at least 2 samples")
    n_l = left.sum()
    n_r = right.sum()
    return float(_gini(parent, n) - (n_l / n) * _gini(left, n_l) - (n_r / n) * _gini(right, n_r))


@dataclass
class DecisionTree:
    """Flat node arrays; feature < 0 marks a leaf."""

    feature: np.ndarray    # int32, -1 for leaves
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32 child node index
    right: np.ndarray      # int32 child node index
    counts: np.ndarray     # (n_nodes, n_classes) int64, filled for leaves

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_classes(self) -> np.ndarray:
        return np.argmax(self.counts, axis=1)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for every row."""
        cur = np.zeros(X.shape[0], dtype=np.int32)
        while True:
            feats = self.feature[cur]
            internal = feats >= 0
            if not internal.any():
                return cur
            rows = np.nonzero(internal)[0]
            nodes = cur[rows]
            go_left = X[rows, self.feature[nodes]] <= self.threshold[nodes]
            cur[rows] = np.where(go_left, self.left[nodes], self.right[nodes])

    def predict_class(self, X: np.ndarray) -> np.ndarray:
        """Per-row class vote: leaf argmax, ties to the lowest ordinal."""
        return self.leaf_classes()[self.apply(X)]

    def max_path_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):  # children always follow parents
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def to_nodes(self) -> list[dict]:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                nodes.append({"f": int(self.feature[i]), "t": float(self.threshold[i]),
                              "l": int(self.left[i]), "r": int(self.right[i])})
            else:
                nodes.append({"counts": [int(c) for c in self.counts[i]]})
        return nodes

    @classmethod
    def from_nodes(cls, nodes: list[dict], n_classes: int = N_CLASSES) -> "DecisionTree":
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int32)
        threshold = np.zeros(n, dtype=np.float64)
        left = np.zeros(n, dtype=np.int32)
        right = np.zeros(n, dtype=np.int32)
        counts = np.zeros((n, n_classes), dtype=np.int64)
        for i, node in enumerate(nodes):
            if "counts" in node:
                counts[i] = node["counts"]
            else:
                feature[i] = node["f"]
                threshold[i] = node["t"]
                left[i] = node["l"]
                right[i] = node["r"]
        return cls(feature, threshold, left, right, counts)


class _TreeBuilder:
    def __init__(self, X: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator):
        self.X = X
        self.y = y
        self.cfg = cfg
        self.rng = rng
        self.k = cfg.resolve_features(X.shape[1])
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.counts: list[np.ndarray] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(0)
        self.right.append(0)
        self.counts.append(np.zeros(N_CLASSES, dtype=np.int64))
        return len(self.feature) - 1

    def build(self, idx: np.ndarray) -> DecisionTree:
        root = self._new_node()
        self._grow(root, idx, depth=0)
        return DecisionTree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            counts=np.stack(self.counts),
        )

    def _grow(self, node: int, idx: np.ndarray, depth: int) -> None:
        y_node = self.y[idx]
        counts = np.bincount(y_node, minlength=N_CLASSES).astype(np.int64)
        self.counts[node] = counts
        if (depth >= self.cfg.max_depth or idx.size < self.cfg.min_samples_split
                or np.max(counts) == idx.size):
            return
        split = self._best_split(idx, counts)
        if split is None:
            return
        feat, thr = split
        go_left = self.X[idx, feat] <= thr
        self.feature[node] = feat
        self.threshold[node] = thr
        left_id = self._new_node()
        right_id = self._new_node()
        self.left[node] = left_id
        self.right[node] = right_id
        self._grow(left_id, idx[go_left], depth + 1)
        self._grow(right_id, idx[~go_left], depth + 1)

    def _best_split(self, idx: np.ndarray, parent_counts: np.ndarray) -> tuple[int, float] | None:
        m = idx.size
        g_parent = _gini(parent_counts, m)
        feats = np.sort(self.rng.choice(self.X.shape[1], size=self.k, replace=False))
        best_gain = -1.0
        best: tuple[int, float] | None = None
        for feat in feats:
            vals = self.X[idx, feat]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            boundaries = np.nonzero(sv[1:] > sv[:-1])[0]
            if boundaries.size == 0:
                continue
            onehot = np.zeros((m, N_CLASSES), dtype=np.int64)
            onehot[np.arange(m), self.y[idx][order]] = 1
            prefix = np.cumsum(onehot, axis=0)
            left_counts = prefix[boundaries]
            n_left = boundaries + 1
            right_counts = parent_counts - left_counts
            n_right = m - n_left
            gains = (g_parent
                     - (n_left / m) * _gini(left_counts, n_left[:, None])
                     - (n_right / m) * _gini(right_counts, n_right[:, None]))
            j = int(np.argmax(gains))  # first max -> lowest threshold
            if gains[j] > best_gain:
                best_gain = float(gains[j])
                best = (int(feat), float((sv[boundaries[j]] + sv[boundaries[j] + 1]) / 2.0))
        return best


def fit_tree(features: np.ndarray, labels: np.ndarray, cfg: ForestConfig,
             tree_seed: int) -> DecisionTree:
    """Grow one tree from its own seeded stream (bootstrap + feature draws)."""
    X = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(tree_seed)
    if cfg.bootstrap:
        idx = rng.integers(0, X.shape[0], size=X.shape[0])
    else:
        idx = np.arange(X.shape[0])
    return _TreeBuilder(X, y, cfg, rng).build(idx)


@dataclass
class Forest:
    trees: list[DecisionTree]
    config: ForestConfig
    label_order: tuple[str, ...] = CANONICAL_LABELS
    n_features: int = 0


def _fit_tree_job(args) -> DecisionTree:
    X, y, cfg, tree_seed = args
    return fit_tree(X, y, cfg, tree_seed)


def fit_forest(features: np.ndarray, labels: np.ndarray, cfg: ForestConfig = ForestConfig(),
               n_jobs: int = 1) -> Forest:
    """Fit the ensemble; tree t's stream depends only on (cfg.seed, t), so
    parallel and serial fits produce identical forests."""
    X = check_feature_matrix(features)
    y = check_labels(labels, X.shape[0])
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError("need at least one sample and one feature")
    seeds = [derive_seed(cfg.seed, "tree", t) for t in range(cfg.n_trees)]
    if n_jobs > 1:
        jobs = [(X, y, cfg, s) for s in seeds]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(_fit_tree_job, jobs, chunksize=max(1, cfg.n_trees // (4 * n_jobs))))
    else:
        trees = [fit_tree(X, y, cfg, s) for s in seeds]
    return Forest(trees=trees, config=cfg, n_features=X.shape[1])


def predict(forest: Forest, batch: np.ndarray) -> np.ndarray:
    """Plurality vote over trees; vote ties resolve to the lowest ordinal."""
    X = check_feature_matrix(batch)
    if forest.n_features and X.shape[1] != forest.n_features:
        raise ValueError(f"batch has {X.shape[1]} features, forest expects {forest.n_features}")
    votes = np.zeros((X.shape[0], N_CLASSES), dtype=np.int64)
    rows = np.arange(X.shape[0])
    for tree in forest.trees:
        votes[rows, tree.predict_class(X)] += 1
    return np.argmax(votes, axis=1)


def save_forest(forest: Forest, path: Path | str) -> None:
    payload = {
        "config": asdict(forest.config),
        "label_order": list(forest.label_order),
        "n_features": forest.n_features,
        "trees": [tree.to_nodes() for tree in forest.trees],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_forest(path: Path | str) -> Forest:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        config = ForestConfig(**payload["config"])
        trees = [DecisionTree.from_nodes(nodes) for nodes in payload["trees"]]
        label_order = tuple(payload["label_order"])
        n_features = int(payload.get("n_features", 0))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise MagscopeError(f"{path}: malformed forest file ({exc})") from exc
    return Forest(trees=trees, config=config, label_order=label_order, n_features=n_features)


class ForestClassifier(BaseEstimator, ClassifierMixin):
    """Estimator wrapper around the from-scratch forest."""

    def __init__(self, n_trees: int = 1000, max_depth: int = 50,
                 min_samples_split: int = 2, features_per_split: int | str = "sqrt",
                 bootstrap: bool = True, seed: int = 42, n_jobs: int = 1):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.features_per_split = features_per_split
        self.bootstrap = bootstrap
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y):
        cfg = ForestConfig(n_trees=self.n_trees, max_depth=self.max_depth,
                           min_samples_split=self.min_samples_split,
                           features_per_split=self.features_per_split,
                           bootstrap=self.bootstrap, seed=self.seed)
        self.forest_ = fit_forest(X, y, cfg, n_jobs=self.n_jobs)
        return self

    def predict(self, X) -> np.ndarray:
        return predict(self.forest_, X)
