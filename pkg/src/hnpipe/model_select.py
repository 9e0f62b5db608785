"""K-fold cross-validation, RMSE-based grid search and the final refit.

Any object with ``fit(X, y) -> model`` where ``model.predict(X)`` returns
an array can be cross-validated; the tree configs in :mod:`hnpipe.trees`
follow this protocol.
"""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .metrics import rmse
from .tabular_io import FeatureMatrix
from .trees import as_array


class _Constant:
    def __init__(self, value):
        self.value = float(value)

    def predict(self, X):
        return np.full(as_array(X).shape[0], self.value)


@dataclass(frozen=True)
class MeanBaseline:
    """Predicts the training-target mean; a floor for any real model."""

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.float64)
        if y.size == 0:
            raise ValueError("cannot fit on an empty target")
        return _Constant(y.mean())


def kfold_indices(n, k=10, seed=0):
    """Seeded shuffle cut into ``k`` folds; the first ``n % k`` get one extra row."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _xy(X, y):
    x = as_array(X)
    if y is None:
        if not isinstance(X, FeatureMatrix) or X.target is None:
            raise ValueError("no target given")
        y = X.target
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (x.shape[0],):
        raise ValueError("target length does not match rows")
    return x, y


@dataclass
class CVResult:
    fold_rmse: list
    mean_rmse: float


def cross_validate(config, X, y=None, k=10, seed=0, folds=None):
    """Fit on each fold's complement and score RMSE on the fold itself."""
    x, y = _xy(X, y)
    if folds is None:
        folds = kfold_indices(x.shape[0], k, seed)
    scores = []
    for fold in folds:
        train = np.setdiff1d(np.arange(x.shape[0]), fold)
        model = config.fit(x[train], y[train])
        scores.append(rmse(model.predict(x[fold]), y[fold]))
    return CVResult(scores, float(np.mean(scores)))


@dataclass
class GridResult:
    best_index: int
    best_config: object
    results: list = field(default_factory=list)

    def table_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["config_id", "fold", "rmse", "mean_rmse"])
        for i, r in enumerate(self.results):
            for f, s in enumerate(r.fold_rmse):
                w.writerow([i, f, repr(float(s)), repr(float(r.mean_rmse))])
        return out.getvalue()


def grid_search(grid, X, y=None, k=10, seed=0):
    """Evaluate every config on the same folds; lowest mean RMSE wins, ties go to the earliest."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    x, y = _xy(X, y)
    folds = kfold_indices(x.shape[0], k, seed)
    results = [cross_validate(c, x, y, folds=folds) for c in grid]
    best = min(range(len(grid)), key=lambda i: (results[i].mean_rmse, i))
    return GridResult(best, grid[best], results)


def final_fit(config, X, y=None):
    x, y = _xy(X, y)
    if x.shape[0] == 0:
        raise ValueError("cannot fit on an empty matrix")
    return config.fit(X if isinstance(X, FeatureMatrix) else x, y)
