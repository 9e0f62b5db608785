"""Exact-greedy CART regression trees, random forests and Newton-boosted trees.

Missing values (NaN) are first-class: every split stores a default
direction.  CART/forest splits send missing rows to the child with more
present training rows (ties left); boosted splits learn the direction with
the higher gain.
"""
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from . import kernels
from .tabular_io import FeatureMatrix

SCHEMA_VERSION = 1
GAIN_RTOL = 1e-12


class Tree:
    """Flat array tree; node 0 is the root, ``feature == -1`` marks a leaf."""

    def __init__(self, feature, threshold, default_left, left, right, value, cover):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.default_left = np.asarray(default_left, dtype=np.bool_)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.cover = np.asarray(cover, dtype=np.float64)

    @classmethod
    def leaf(cls, value, cover=1.0):
        return cls([-1], [0.0], [True], [-1], [-1], [value], [cover])

    @property
    def n_nodes(self):
        return self.feature.size

    def is_leaf(self, node):
        return self.feature[node] < 0

    def predict(self, x):
        return kernels.tree_predict(self.feature, self.threshold, self.default_left, self.left, self.right, self.value, x)

    def depth(self, node=0):
        if self.is_leaf(node):
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def to_dict(self, node=0):
        d = {"cover": float(self.cover[node]), "value": float(self.value[node])}
        if not self.is_leaf(node):
            d.update(
                feature=int(self.feature[node]),
                threshold=float(self.threshold[node]),
                default_left=bool(self.default_left[node]),
                left=self.to_dict(self.left[node]),
                right=self.to_dict(self.right[node]),
            )
        return d

    @classmethod
    def from_dict(cls, d):
        b = _Builder()

        def walk(n):
            i = b.add(n["value"], n["cover"])
            if "feature" in n:
                lo = walk(n["left"])
                hi = walk(n["right"])
                b.split(i, n["feature"], n["threshold"], n["default_left"], lo, hi)
            return i

        walk(d)
        return b.build()


class _Builder:
    def __init__(self):
        self.cols = {k: [] for k in ("feature", "threshold", "default_left", "left", "right", "value", "cover")}

    def add(self, value, cover):
        c = self.cols
        c["feature"].append(-1)
        c["threshold"].append(0.0)
        c["default_left"].append(True)
        c["left"].append(-1)
        c["right"].append(-1)
        c["value"].append(float(value))
        c["cover"].append(float(cover))
        return len(c["value"]) - 1

    def split(self, node, feature, threshold, default_left, left, right):
        c = self.cols
        c["feature"][node] = int(feature)
        c["threshold"][node] = float(threshold)
        c["default_left"][node] = bool(default_left)
        c["left"][node] = int(left)
        c["right"][node] = int(right)

    def build(self):
        c = self.cols
        return Tree(c["feature"], c["threshold"], c["default_left"], c["left"], c["right"], c["value"], c["cover"])


def as_array(X):
    if isinstance(X, FeatureMatrix):
        return X.values
    x = np.asarray(X, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def _check_xy(x, y):
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot fit on an empty matrix")
    if y.shape != (x.shape[0],):
        raise ValueError(f"target length {y.shape} does not match {x.shape[0]} rows")
    if np.isnan(y).any():
        raise ValueError("target contains missing values")
    return y


def n_split_features(mode, p):
    if mode in (None, "all"):
        return p
    if mode == "third":
        return max(1, p // 3)
    if mode == "sqrt":
        return max(1, int(math.sqrt(p)))
    if isinstance(mode, int):
        return max(1, min(p, mode))
    if isinstance(mode, float):
        return max(1, min(p, int(mode * p)))
    raise ValueError(f"unknown max_features mode {mode!r}")


def _sorted_present(col, rows):
    v = col[rows]
    miss = np.isnan(v)
    pres = np.flatnonzero(~miss)
    order = pres[np.argsort(v[pres], kind="stable")]
    return order, miss


# ---------------------------------------------------------------------------
# CART


def fit_cart(X, y, max_features="all", max_depth=None, seed=0, min_samples_split=2):
    """Variance-reduction regression tree; leaves predict the mean target."""
    x = as_array(X)
    y = _check_xy(x, y)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = x.shape[1]
    m = n_split_features(max_features, p)
    b = _Builder()
    root = b.add(0.0, 0.0)
    stack = [(root, np.arange(x.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        yr = y[rows]
        if yr.min() == yr.max():
            mean = float(yr[0])
        else:
            mean = float(yr.mean())
        b.cols["value"][node] = mean
        b.cols["cover"][node] = float(rows.size)
        if rows.size < max(2, min_samples_split) or (max_depth is not None and depth >= max_depth) or yr.min() == yr.max():
            continue
        yc = yr - mean
        sse = float(yc @ yc)
        feats = range(p) if m >= p else np.sort(rng.choice(p, size=m, replace=False))
        best = (-np.inf, 0, 0.0, True)
        for f in feats:
            order, miss = _sorted_present(x[:, f], rows)
            n_miss = int(miss.sum())
            gain, thr, dleft = kernels.best_split_sse(
                np.ascontiguousarray(x[rows[order], f]), np.ascontiguousarray(yc[order]),
                float(yc[miss].sum()) if n_miss else 0.0, float(n_miss),
            )
            if gain > best[0]:
                best = (gain, int(f), thr, dleft)
        gain, f, thr, dleft = best
        if not gain > GAIN_RTOL * sse:
            continue
        v = x[rows, f]
        go_left = np.where(np.isnan(v), dleft, v <= thr)
        lo = b.add(0.0, 0.0)
        hi = b.add(0.0, 0.0)
        b.split(node, f, thr, dleft, lo, hi)
        # right pushed first so the left subtree is finished first
        stack.append((hi, rows[~go_left], depth + 1))
        stack.append((lo, rows[go_left], depth + 1))
    return b.build()


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class TreeEnsemble:
    kind: str  # "cart" | "rf" | "gbt"
    trees: list
    n_features: int
    base_score: float = 0.0
    tree_weight: float = 1.0
    config: Optional[dict] = None
    feature_names: Optional[list] = None

    def predict(self, X):
        return predict_ensemble(self, X)

    def to_json(self):
        doc = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "n_features": self.n_features,
            "base_score": self.base_score,
            "tree_weight": self.tree_weight,
            "config": self.config,
            "feature_names": self.feature_names,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True).encode("utf-8")

    @classmethod
    def from_json(cls, data):
        doc = json.loads(data)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema {doc.get('schema_version')}")
        return cls(
            doc["kind"], [Tree.from_dict(t) for t in doc["trees"]], doc["n_features"],
            doc["base_score"], doc["tree_weight"], doc["config"], doc["feature_names"],
        )


def predict_ensemble(ens, X):
    x = as_array(X)
    if x.shape[1] != ens.n_features:
        raise ValueError(f"model expects {ens.n_features} features, got {x.shape[1]}")
    total = np.zeros(x.shape[0])
    for t in ens.trees:
        total += t.predict(x)
    return ens.base_score + ens.tree_weight * total


@dataclass(frozen=True)
class RFConfig:
    n_trees: int = 100
    max_features: Union[str, int, float] = "third"
    bootstrap: bool = True
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")

    def fit(self, X, y):
        return fit_random_forest(X, y, self)


def fit_random_forest(X, y, cfg=RFConfig()):
    x = as_array(X)
    y = _check_xy(x, y)
    n = x.shape[0]
    trees = []
    for ss in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(ss)
        rows = np.sort(rng.integers(0, n, size=n)) if cfg.bootstrap else np.arange(n)
        trees.append(fit_cart(x[rows], y[rows], cfg.max_features, cfg.max_depth, rng, cfg.min_samples_split))
    weight = 1.0 if cfg.n_trees == 1 else 1.0 / cfg.n_trees
    names = list(X.columns) if isinstance(X, FeatureMatrix) else None
    return TreeEnsemble("rf", trees, x.shape[1], 0.0, weight, asdict(cfg), names)


# ---------------------------------------------------------------------------
# gradient boosting (squared error, hessian 1)


@dataclass(frozen=True)
class GBTConfig:
    n_estimators: int = 120
    learning_rate: float = 0.05
    max_depth: int = 4
    subsample: float = 0.7
    colsample_bytree: float = 0.6
    colsample_bylevel: float = 0.8
    colsample_bynode: float = 1.0
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    base_score: Optional[float] = None  # None: mean of the training targets
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "subsample", "colsample_bytree", "colsample_bylevel", "colsample_bynode"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")

    def fit(self, X, y):
        return fit_gbt(X, y, self)


def _colsample(rng, feats, frac):
    if frac >= 1.0:
        return feats
    k = max(1, int(frac * len(feats)))
    return np.sort(rng.choice(feats, size=k, replace=False))


def _fit_newton_tree(x, g, h, rows, cfg, rng):
    p = x.shape[1]
    tree_feats = _colsample(rng, np.arange(p), cfg.colsample_bytree)
    level_feats = [_colsample(rng, tree_feats, cfg.colsample_bylevel) for _ in range(cfg.max_depth)]
    lam, lr = cfg.reg_lambda, cfg.learning_rate
    b = _Builder()
    root = b.add(0.0, 0.0)
    stack = [(root, rows, 0)]
    while stack:
        node, r, depth = stack.pop()
        gs, hs = g[r], h[r]
        G, H = float(gs.sum()), float(hs.sum())
        b.cols["value"][node] = lr * (-G / (H + lam)) if H + lam > 0 else 0.0
        b.cols["cover"][node] = H
        if depth >= cfg.max_depth or r.size < 2:
            continue
        feats = _colsample(rng, level_feats[depth], cfg.colsample_bynode)
        scale = float(gs @ gs)
        best = (-np.inf, 0, 0.0, True)
        for f in feats:
            order, miss = _sorted_present(x[:, f], r)
            gain, thr, dleft = kernels.best_split_newton(
                np.ascontiguousarray(x[r[order], f]), np.ascontiguousarray(gs[order]), np.ascontiguousarray(hs[order]),
                float(gs[miss].sum()), float(hs[miss].sum()), lam, cfg.min_child_weight,
            )
            if gain > best[0]:
                best = (gain, int(f), thr, dleft)
        gain, f, thr, dleft = best
        if not gain > GAIN_RTOL * scale:
            continue
        v = x[r, f]
        go_left = np.where(np.isnan(v), dleft, v <= thr)
        lo = b.add(0.0, 0.0)
        hi = b.add(0.0, 0.0)
        b.split(node, f, thr, dleft, lo, hi)
        stack.append((hi, r[~go_left], depth + 1))
        stack.append((lo, r[go_left], depth + 1))
    return b.build()


def fit_gbt(X, y, cfg=GBTConfig(), callback=None):
    """Boost ``cfg.n_estimators`` depth-limited Newton trees on squared error.

    Leaf values are stored already multiplied by the learning rate.
    ``callback(round, train_predictions)`` is called after every round.
    """
    x = as_array(X)
    y = _check_xy(x, y)
    n = x.shape[0]
    if cfg.base_score is not None:
        base = float(cfg.base_score)
    elif y.min() == y.max():
        base = float(y[0])
    else:
        base = float(y.mean())
    pred = np.full(n, base)
    h = np.ones(n)
    rng = np.random.default_rng(cfg.seed)
    trees = []
    for k in range(cfg.n_estimators):
        g = pred - y
        if cfg.subsample < 1.0:
            rows = np.sort(rng.choice(n, size=max(1, int(round(cfg.subsample * n))), replace=False))
        else:
            rows = np.arange(n)
        t = _fit_newton_tree(x, g, h, rows, cfg, rng)
        trees.append(t)
        pred = pred + t.predict(x)
        if callback is not None:
            callback(k + 1, pred)
    names = list(X.columns) if isinstance(X, FeatureMatrix) else None
    return TreeEnsemble("gbt", trees, x.shape[1], base, 1.0, asdict(cfg), names)


def cart_ensemble(tree, n_features):
    return TreeEnsemble("cart", [tree], n_features)
