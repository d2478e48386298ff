"""Out-of-fold stacking of three tree ensembles under a linear meta-model."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .ensemble import LEAF_WISE, LEVEL_WISE, BoostedModel, ForestModel, fit_forest, fit_gbm
from .linear import LinearModel, fit_linear
from .tree import RegressionTree, check_X, check_Xy

FORMAT_VERSION = 1
BASE_NAMES = ("forest", "gbm_level", "gbm_leaf")


class ModelFormatError(ValueError):
    pass


@dataclass(eq=False)
class StackedModel:
    forest: ForestModel
    gbm_level: BoostedModel
    gbm_leaf: BoostedModel
    meta: LinearModel
    feature_order: tuple[str, ...]
    config: TrainConfig
    # training-time bookkeeping, not persisted
    oof: np.ndarray | None = field(default=None, repr=False)
    folds: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def bases(self):
        return (self.forest, self.gbm_level, self.gbm_leaf)

    @property
    def n_features(self) -> int:
        return len(self.feature_order)

    def base_predictions(self, X) -> np.ndarray:
        X = check_X(X, self.n_features)
        return np.column_stack([m.predict(X) for m in self.bases])

    def predict(self, X) -> np.ndarray:
        return self.meta.predict(self.base_predictions(X))


def make_folds(n: int, n_folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of row indices cut into contiguous blocks."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


def _fit_bases(X, y, config, threads):
    return (fit_forest(X, y, config, threads=threads),
            fit_gbm(X, y, config, LEVEL_WISE),
            fit_gbm(X, y, config, LEAF_WISE))


def fit_stacked(X, y, config: TrainConfig | None = None, feature_order: Sequence[str] | None = None,
                threads: int = 1) -> StackedModel:
    """Stack a random forest and two boosted models through linear regression.

    For each of ``n_folds`` folds the three base models are trained on the
    other folds and predict the held-out one; the meta-model is fitted to
    the resulting out-of-fold matrix.  The bases are then refitted on all
    rows for inference.
    """
    config = config or TrainConfig()
    X, y = check_Xy(X, y)
    n, d = X.shape
    k = config.n_folds
    if k < 2:
        raise ValueError("stacking needs n_folds >= 2")
    if n < k * config.min_samples_leaf or n < 2 * k:
        raise ValueError(f"{n} rows are too few for {k} folds with min_samples_leaf="
                         f"{config.min_samples_leaf}")
    feature_order = tuple(feature_order) if feature_order is not None else tuple(f"x{i}" for i in range(d))
    if len(feature_order) != d:
        raise ValueError(f"feature_order has {len(feature_order)} names for {d} columns")

    folds = make_folds(n, k, config.seed)
    oof = np.full((n, 3), np.nan)
    for held in folds:
        train = np.setdiff1d(np.arange(n), held, assume_unique=True)
        bases = _fit_bases(X[train], y[train], config, threads)
        for j, m in enumerate(bases):
            oof[held, j] = m.predict(X[held])
    meta = fit_linear(oof, y, config.ridge_eps)
    forest, level, leaf = _fit_bases(X, y, config, threads)
    return StackedModel(forest, level, leaf, meta, feature_order, config, oof, folds)


def predict(model, X) -> np.ndarray:
    """Predictions of any fitted model in this package."""
    return model.predict(X)


def feature_importance(model, feature_names: Sequence[str] | None = None) -> dict[str, float]:
    """Total split gain per feature, normalised to sum to one.

    A tree model that never split returns all zeros.
    """
    if isinstance(model, (LinearModel, StackedModel)):
        raise TypeError(f"feature importance is only defined for tree models, not {type(model).__name__}")
    if not isinstance(model, (RegressionTree, ForestModel, BoostedModel)):
        raise TypeError(f"unsupported model type {type(model).__name__}")
    raw = model.importances()
    names = feature_names or [f"x{i}" for i in range(len(raw))]
    if len(names) != len(raw):
        raise ValueError(f"{len(names)} names for {len(raw)} features")
    total = raw.sum()
    frac = raw / total if total > 0 else np.zeros_like(raw)
    return {n: float(v) for n, v in zip(names, frac)}


def base_importances(model: StackedModel) -> dict[str, dict[str, float]]:
    return {name: feature_importance(m, model.feature_order) for name, m in zip(BASE_NAMES, model.bases)}


# ---- persistence --------------------------------------------------------------

def _boosted_dict(m: BoostedModel) -> dict:
    return {"init_value": m.init_value, "learning_rate": m.learning_rate,
            "growth_strategy": m.growth_strategy, "trees": [t.to_dict() for t in m.trees]}


def model_to_dict(model: StackedModel, metadata: dict | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "feature_order": list(model.feature_order),
        "forest": {"feature_subsample": model.forest.feature_subsample, "seeds": model.forest.seeds,
                   "trees": [t.to_dict() for t in model.forest.trees]},
        "gbm_level": _boosted_dict(model.gbm_level),
        "gbm_leaf": _boosted_dict(model.gbm_leaf),
        "meta": {"weights": model.meta.weights.tolist(), "intercept": model.meta.intercept},
        "train_config": model.config.to_dict(),
    }
    if metadata is not None:
        doc["metadata"] = metadata
    return doc


def save_model(model: StackedModel, path, metadata: dict | None = None) -> None:
    text = json.dumps(model_to_dict(model, metadata), separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def model_from_dict(doc: dict) -> StackedModel:
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ModelFormatError("model file has no format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format_version {doc['format_version']!r} "
                               f"(expected {FORMAT_VERSION})")
    try:
        order = tuple(doc["feature_order"])
        d = len(order)
        f = doc["forest"]
        forest = ForestModel([RegressionTree.from_dict(t, d) for t in f["trees"]],
                             float(f["feature_subsample"]), list(f["seeds"]), d)

        def boosted(b):
            return BoostedModel(float(b["init_value"]), [RegressionTree.from_dict(t, d) for t in b["trees"]],
                                float(b["learning_rate"]), b["growth_strategy"], d)

        meta = LinearModel(np.asarray(doc["meta"]["weights"], dtype=np.float64),
                           float(doc["meta"]["intercept"]))
        if meta.weights.shape != (3,):
            raise ModelFormatError("meta-model must have exactly 3 weights")
        return StackedModel(forest, boosted(doc["gbm_level"]), boosted(doc["gbm_leaf"]), meta, order,
                            TrainConfig.from_dict(doc["train_config"]))
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc!r}") from None


def load_model(path) -> StackedModel:
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a valid model file ({exc})") from None
    return model_from_dict(doc)


def read_metadata(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh).get("metadata", {})
