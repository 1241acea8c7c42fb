"""Random forest of CART trees with Gini splits and MDI importances.

Trees are stored as flat node arrays. Node 0 is the root; a node with
``feature == -1`` is a leaf. A row goes left when ``x[feature] <= threshold``.

Persistence is a JSON document::

    {
      "format": "gatedfusion-forest",
      "version": 1,
      "n_features": int,
      "config": {n_trees, max_features, min_samples_leaf, max_depth, bootstrap, seed},
      "per_tree_seeds": [int, ...],
      "trees": [node, ...]
    }

where ``node`` is either a leaf ``{"class_counts": [n0, n1]}`` or a split
``{"feature": int, "threshold": float, "impurity_decrease": float,
"class_counts": [n0, n1], "left": node, "right": node}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DataError, FormatError

FOREST_FORMAT = "gatedfusion-forest"


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_features: Union[int, str, None] = "sqrt"
    min_samples_leaf: int = 1
    max_depth: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be at least 1")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be non-negative")
        mf = self.max_features
        if not (mf is None or mf == "sqrt" or (isinstance(mf, int) and mf >= 1)):
            raise ConfigError("max_features must be a positive int, 'sqrt' or null")

    @classmethod
    def from_dict(cls, d: dict) -> "ForestConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown forest config keys: {sorted(unknown)}")
        return cls(**d)

    def resolve_max_features(self, n_candidates: int, n_features: int) -> int:
        mf = self.max_features
        if mf is None:
            k = n_candidates
        elif mf == "sqrt":
            k = int(math.sqrt(n_candidates))
        else:
            if mf > n_features:
                raise ConfigError(f"max_features={mf} exceeds {n_features} features")
            k = mf
        return max(1, min(k, n_candidates))


class Tree:
    """Fitted CART tree in flat-array form."""

    def __init__(self, feature, threshold, left, right, counts, impurity_decrease, n_features):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64).reshape(-1, 2)
        self.impurity_decrease = np.asarray(impurity_decrease, dtype=np.float64)
        self.n_features = n_features

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def leaf_value(self) -> np.ndarray:
        """Class-1 fraction of the training rows at each node."""
        return self.counts[:, 1] / self.counts.sum(axis=1)

    def apply(self, rows) -> np.ndarray:
        """Leaf index reached by every row."""
        x = np.asarray(rows, dtype=np.float64)
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            cur = node[active]
            go_left = x[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict_proba(self, rows) -> np.ndarray:
        return self.leaf_value()[self.apply(rows)]

    def feature_importance_raw(self) -> np.ndarray:
        out = np.zeros(self.n_features)
        internal = ~self.is_leaf
        np.add.at(out, self.feature[internal], self.impurity_decrease[internal])
        return out

    def to_dict(self, node: int = 0) -> dict:
        c = [int(v) for v in self.counts[node]]
        if self.feature[node] < 0:
            return {"class_counts": c}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "impurity_decrease": float(self.impurity_decrease[node]),
            "class_counts": c,
            "left": self.to_dict(int(self.left[node])),
            "right": self.to_dict(int(self.right[node])),
        }

    @classmethod
    def from_dict(cls, root: dict, n_features: int) -> "Tree":
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "counts", "dec")}

        def add(node):
            i = len(cols["feature"])
            for k in cols:
                cols[k].append(None)
            cols["counts"][i] = node["class_counts"]
            if "feature" not in node:
                cols["feature"][i], cols["threshold"][i] = -1, 0.0
                cols["left"][i] = cols["right"][i] = -1
                cols["dec"][i] = 0.0
                return i
            cols["feature"][i] = node["feature"]
            cols["threshold"][i] = node["threshold"]
            cols["dec"][i] = node["impurity_decrease"]
            cols["left"][i] = add(node["left"])
            cols["right"][i] = add(node["right"])
            return i

        add(root)
        return cls(
            cols["feature"], cols["threshold"], cols["left"], cols["right"],
            cols["counts"], cols["dec"], n_features,
        )


def _best_split(x_node: np.ndarray, y_node: np.ndarray, features, k: int, min_leaf: int):
    """Best (score, feature, threshold) over the first `k` non-constant features in `features`.

    The score is sum over children of (n0^2 + n1^2) / n_child, which grows as
    the weighted Gini impurity of the children shrinks.
    """
    n = y_node.size
    best = None
    visited = 0
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    ok_size = (nl >= min_leaf) & (nr >= min_leaf)
    total1 = float(y_node.sum())
    for f in features:
        if visited >= k:
            break
        col = x_node[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        if xs[0] == xs[-1]:
            continue
        visited += 1
        c1 = np.cumsum(y_node[order])[:-1].astype(np.float64)
        c0 = nl - c1
        r1 = total1 - c1
        r0 = nr - r1
        score = (c0 * c0 + c1 * c1) / nl + (r0 * r0 + r1 * r1) / nr
        valid = ok_size & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        score = np.where(valid, score, -np.inf)
        i = int(np.argmax(score))
        thr = 0.5 * (xs[i] + xs[i + 1])
        if not xs[i] <= thr < xs[i + 1]:
            thr = xs[i]
        cand = (float(score[i]), int(f), float(thr))
        if best is None or (-cand[0], cand[1], cand[2]) < (-best[0], best[1], best[2]):
            best = cand
    return best


def fit_tree(
    rows,
    labels,
    config: Optional[ForestConfig] = None,
    seed: int = 0,
    candidate_features=None,
) -> Tree:
    """Grow one CART tree greedily on Gini impurity.

    At each node features are visited in a random order until
    ``max_features`` non-constant ones have been scored. Ties in the split
    score go to the lowest feature index, then the lowest threshold.
    """
    cfg = config or ForestConfig(n_trees=1, bootstrap=False)
    x = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, n_features = x.shape
    if n < 1:
        raise DataError("cannot fit a tree on zero rows")
    if candidate_features is None:
        candidate_features = np.flatnonzero(x.min(axis=0) < x.max(axis=0))
    candidate_features = np.asarray(candidate_features, dtype=np.int64)
    k = cfg.resolve_max_features(max(1, candidate_features.size), n_features)
    rng = np.random.default_rng(seed)

    feature, threshold, left, right, counts, dec = [], [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n1 = int(y[idx].sum())
        counts.append((idx.size - n1, n1))
        dec.append(0.0)
        return len(feature) - 1

    # nodes are numbered in preorder, the same order Tree.from_dict uses
    stack = [(-1, False, np.arange(n), 0)]
    while stack:
        parent, is_right, idx, depth = stack.pop()
        node = new_node(idx)
        if parent >= 0:
            (right if is_right else left)[parent] = node
        n_t = idx.size
        n0, n1 = counts[node]
        if n0 == 0 or n1 == 0 or n_t < 2 * cfg.min_samples_leaf:
            continue
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue
        if candidate_features.size == 0:
            continue
        order = candidate_features[rng.permutation(candidate_features.size)]
        split = _best_split(x[idx], y[idx], order, k, cfg.min_samples_leaf)
        if split is None:
            continue
        score, f, thr = split
        go_left = x[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        dec[node] = max(0.0, (score - (n0 * n0 + n1 * n1) / n_t) / n)
        stack.append((node, True, idx[~go_left], depth + 1))
        stack.append((node, False, idx[go_left], depth + 1))

    return Tree(feature, threshold, left, right, counts, dec, n_features)


@dataclass
class Forest:
    trees: list
    n_features: int
    config: ForestConfig
    per_tree_seeds: list

    def to_json(self) -> str:
        doc = {
            "format": FOREST_FORMAT,
            "version": 1,
            "n_features": self.n_features,
            "config": asdict(self.config),
            "per_tree_seeds": [int(s) for s in self.per_tree_seeds],
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        doc = json.loads(text)
        if doc.get("format") != FOREST_FORMAT:
            raise FormatError("not a serialized forest")
        n_features = int(doc["n_features"])
        return cls(
            trees=[Tree.from_dict(t, n_features) for t in doc["trees"]],
            n_features=n_features,
            config=ForestConfig.from_dict(doc["config"]),
            per_tree_seeds=list(doc["per_tree_seeds"]),
        )


def fit_forest(rows, labels, config: Optional[ForestConfig] = None) -> Forest:
    """Bagged CART ensemble.

    Each tree gets its own seed drawn from ``config.seed``; with bootstrap on
    it trains on n rows drawn with replacement. Features that are constant
    over the whole training set are never considered, so padding the input
    with constant columns leaves the fitted trees unchanged.
    """
    cfg = config or ForestConfig()
    x = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DataError("rows must be an (n, features) matrix matching labels")
    if np.unique(y).size < 2:
        raise DataError("random forest needs both classes in the training data")
    n, n_features = x.shape
    cfg.resolve_max_features(n_features, n_features)
    candidates = np.flatnonzero(x.min(axis=0) < x.max(axis=0))
    seeds = [int(s) for s in np.random.default_rng(cfg.seed).integers(0, 2**63 - 1, size=cfg.n_trees)]
    trees = []
    for s in seeds:
        if cfg.bootstrap:
            sample = np.random.default_rng([s, 1]).integers(0, n, size=n)
            xt, yt = x[sample], y[sample]
        else:
            xt, yt = x, y
        trees.append(fit_tree(xt, yt, cfg, seed=s, candidate_features=candidates))
    return Forest(trees=trees, n_features=n_features, config=cfg, per_tree_seeds=seeds)


def predict_proba_forest(forest: Forest, rows) -> np.ndarray:
    """Mean class-1 leaf fraction over trees.

    Per-row values are summed in sorted order, so the result does not depend
    on the order of the trees.
    """
    x = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if x.shape[1] != forest.n_features:
        raise DataError(f"expected {forest.n_features} features, got {x.shape[1]}")
    per_tree = np.stack([t.predict_proba(x) for t in forest.trees])
    return np.sort(per_tree, axis=0).sum(axis=0) / len(forest.trees)


def mdi_importances(forest: Forest) -> np.ndarray:
    """Weighted Gini decrease per feature, averaged over trees and normalised to sum 1."""
    raw = np.mean([t.feature_importance_raw() for t in forest.trees], axis=0)
    total = raw.sum()
    return raw / total if total > 0 else np.zeros_like(raw)
