"""SHAP attributions for tree ensembles, a brute-force Shapley check, and reports.

The value of a feature coalition S is the path-dependent expectation: at a
split on a feature in S follow the row, otherwise average both children
weighted by their training cover.
"""
import csv
import io
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import kernels
from .features import IMAGE_COLUMNS
from .metrics import pearson_corr_matrix
from .trees import as_array

MAX_BRUTE_FORCE_FEATURES = 12


@dataclass
class Attribution:
    phi: np.ndarray
    phi0: float


def expected_value(tree, node=0):
    """Cover-weighted mean of the leaves below ``node``."""
    if tree.is_leaf(node):
        return float(tree.value[node])
    lo, hi = tree.left[node], tree.right[node]
    return float((tree.cover[lo] * expected_value(tree, lo) + tree.cover[hi] * expected_value(tree, hi)) / tree.cover[node])


def base_value(ens):
    return ens.base_score + ens.tree_weight * sum(expected_value(t) for t in ens.trees)


def _check_width(ens, x):
    if x.shape[1] != ens.n_features:
        raise ValueError(f"model expects {ens.n_features} features, got {x.shape[1]}")


def tree_shap_matrix(ens, X):
    """SHAP values for every row: returns ``(phi (n, p), phi0)``."""
    x = as_array(X)
    _check_width(ens, x)
    phi = np.zeros(x.shape)
    for t in ens.trees:
        if t.n_nodes > 1:
            kernels.tree_shap(t.feature, t.threshold, t.default_left, t.left, t.right, t.value, t.cover, t.depth(), x, phi)
    return ens.tree_weight * phi, base_value(ens)


def tree_shap(ens, x):
    phi, phi0 = tree_shap_matrix(ens, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return Attribution(phi[0], phi0)


def coalition_value(tree, x, subset, node=0):
    if tree.is_leaf(node):
        return float(tree.value[node])
    f = tree.feature[node]
    lo, hi = tree.left[node], tree.right[node]
    if f in subset:
        v = x[f]
        go_left = tree.default_left[node] if math.isnan(v) else v <= tree.threshold[node]
        return coalition_value(tree, x, subset, lo if go_left else hi)
    return float((tree.cover[lo] * coalition_value(tree, x, subset, lo) + tree.cover[hi] * coalition_value(tree, x, subset, hi)) / tree.cover[node])


def brute_force_shapley(ens, x):
    """Exact Shapley values by enumerating every coalition."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    m = ens.n_features
    _check_width(ens, x.reshape(1, -1))
    if m > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(f"brute force supports at most {MAX_BRUTE_FORCE_FEATURES} features, got {m}")

    def v(subset):
        return ens.base_score + ens.tree_weight * sum(coalition_value(t, x, subset) for t in ens.trees)

    values = {}
    for k in range(m + 1):
        for s in combinations(range(m), k):
            values[frozenset(s)] = v(frozenset(s))
    phi = np.zeros(m)
    for i in range(m):
        rest = [j for j in range(m) if j != i]
        for k in range(m):
            w = math.factorial(k) * math.factorial(m - k - 1) / math.factorial(m)
            for s in combinations(rest, k):
                s = frozenset(s)
                phi[i] += w * (values[s | {i}] - values[s])
    return Attribution(phi, values[frozenset()])


@dataclass
class ShapSummary:
    features: list  # sorted by sum |phi|, descending
    sum_abs: np.ndarray
    mean_abs: np.ndarray

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["feature", "sum_abs_shap", "mean_abs_shap", "rank"])
        for r, (f, s, m) in enumerate(zip(self.features, self.sum_abs, self.mean_abs), start=1):
            w.writerow([f, repr(float(s)), repr(float(m)), r])
        return out.getvalue()


def shap_summary(ens, X, names=None):
    x = as_array(X)
    if x.shape[0] == 0:
        raise ValueError("need at least one row")
    if names is None:
        names = getattr(X, "columns", None) or ens.feature_names or [f"f{i}" for i in range(x.shape[1])]
    phi, _ = tree_shap_matrix(ens, x)
    a = np.abs(phi)
    total = a.sum(axis=0)
    mean = total / x.shape[0]
    # stable sort keeps column order among equal sums
    order = np.argsort(-total, kind="stable")
    return ShapSummary([names[i] for i in order], total[order], mean[order])


def correlation_order(columns, target_name="RFS"):
    image = [c for c in IMAGE_COLUMNS if c in columns]
    rest = [c for c in columns if c not in image and c != target_name]
    return image + rest + ([target_name] if target_name in columns else [])


def correlation_report(m, target_name="RFS"):
    """Correlation matrix of the features and the target, image columns first and target last."""
    cols = list(m.columns)
    data = {c: m.values[:, i] for i, c in enumerate(cols)}
    if m.target is not None:
        cols.append(target_name)
        data[target_name] = m.target
    order = correlation_order(cols, target_name)
    res = pearson_corr_matrix(np.column_stack([data[c] for c in order]), order)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([""] + order)
    for i, c in enumerate(order):
        w.writerow([c] + ["" if np.isnan(v) else repr(float(v)) for v in res.matrix[i]])
    return res, out.getvalue()

