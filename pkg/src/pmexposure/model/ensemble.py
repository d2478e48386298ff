"""Bagged forests and stagewise gradient boosting over :mod:`.tree`."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .tree import RegressionTree, check_X, check_Xy, fit_tree

LEVEL_WISE = "level_wise"
LEAF_WISE = "leaf_wise"


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def shifted_mean(y) -> float:
    """Mean that returns a constant sample's value exactly."""
    y = np.asarray(y, dtype=np.float64)
    return float(y[0] + (y - y[0]).sum() / y.size)


@dataclass(eq=False)
class ForestModel:
    trees: list[RegressionTree]
    feature_subsample: float
    seeds: list[int]
    n_features: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_trees(self, X) -> np.ndarray:
        X = check_X(X, self.n_features)
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X) -> np.ndarray:
        per_tree = self.predict_trees(X)
        # shifted by the first tree so that identical trees average exactly
        ref = per_tree[0]
        return ref + (per_tree - ref).sum(axis=0) / self.n_trees

    def importances(self) -> np.ndarray:
        return np.sum([t.importances() for t in self.trees], axis=0)


def fit_forest(X, y, config: TrainConfig | None = None, threads: int = 1) -> ForestModel:
    """Random forest: bootstrap rows per tree, fresh feature subset per split.

    Tree ``i`` draws everything from ``default_rng(seed + i)``, so the model
    does not depend on how many threads build it.
    """
    config = config or TrainConfig()
    X, y = check_Xy(X, y)
    n, d = X.shape
    if n < 2:
        raise ValueError("fit_forest needs at least 2 rows")
    p = config.forest
    k = math.ceil(d * p.feature_subsample)
    seeds = [config.seed + i for i in range(p.n_trees)]

    def one(seed):
        rng = np.random.default_rng(seed)
        rows = rng.integers(0, n, size=n)
        return fit_tree(X[rows], y[rows], max_depth=p.max_depth,
                        min_samples_leaf=config.min_samples_leaf, max_features=k, rng=rng)

    return ForestModel(_map(one, seeds, threads), p.feature_subsample, seeds, d)


@dataclass(eq=False)
class BoostedModel:
    init_value: float
    trees: list[RegressionTree]
    learning_rate: float
    growth_strategy: str
    n_features: int
    loss_trace: list[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = check_X(X, self.n_features)
        out = np.full(X.shape[0], self.init_value)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def importances(self) -> np.ndarray:
        if not self.trees:
            return np.zeros(self.n_features)
        return np.sum([t.importances() for t in self.trees], axis=0)


def fit_gbm(X, y, config: TrainConfig | None = None, growth_strategy: str = LEVEL_WISE) -> BoostedModel:
    """Least-squares gradient boosting.

    Each stage fits a tree to the current residuals.  ``level_wise`` grows
    every level out to ``max_depth``; ``leaf_wise`` keeps splitting the
    best-gain leaf until ``max_leaves``.  ``loss_trace[k]`` is the training
    MSE after ``k`` stages.
    """
    config = config or TrainConfig()
    X, y = check_Xy(X, y)
    if X.shape[0] < 2:
        raise ValueError("fit_gbm needs at least 2 rows")
    p = config.boosting
    if growth_strategy == LEVEL_WISE:
        shape = {"max_depth": p.max_depth}
    elif growth_strategy == LEAF_WISE:
        shape = {"max_leaves": p.max_leaves}
    else:
        raise ValueError(f"unknown growth strategy {growth_strategy!r}")

    init = shifted_mean(y)
    current = np.full(y.shape, init)
    trace = [float(np.mean((y - current) ** 2))]
    trees = []
    for _ in range(p.n_trees):
        tree = fit_tree(X, y - current, min_samples_leaf=config.min_samples_leaf, **shape)
        current += p.learning_rate * tree.predict(X)
        trees.append(tree)
        trace.append(float(np.mean((y - current) ** 2)))
    return BoostedModel(init, trees, p.learning_rate, growth_strategy, X.shape[1], trace)
