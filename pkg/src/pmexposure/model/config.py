"""Training hyperparameters.

The defaults are desk-scale choices that train in seconds; every field can be
overridden from a JSON config via :meth:`TrainConfig.from_dict`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    feature_subsample: float = 1 / 3
    max_depth: int = 12


@dataclass(frozen=True)
class BoostingParams:
    n_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 6
    max_leaves: int = 31


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_folds: int = 5
    train_frac: float = 0.8
    forest: ForestParams = field(default_factory=ForestParams)
    boosting: BoostingParams = field(default_factory=BoostingParams)
    min_samples_leaf: int = 5
    ridge_eps: float = 1e-8

    def __post_init__(self):
        counts = {"n_folds": self.n_folds, "min_samples_leaf": self.min_samples_leaf,
                  "forest.n_trees": self.forest.n_trees, "forest.max_depth": self.forest.max_depth,
                  "boosting.max_depth": self.boosting.max_depth,
                  "boosting.max_leaves": self.boosting.max_leaves}
        for name, v in counts.items():
            if not (isinstance(v, int) and v >= 1):
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")
        if not (isinstance(self.boosting.n_trees, int) and self.boosting.n_trees >= 0):
            raise ValueError(f"boosting.n_trees must be >= 0, got {self.boosting.n_trees!r}")
        if self.boosting.max_leaves < 2:
            raise ValueError("boosting.max_leaves must be >= 2")
        for name, v in {"train_frac": self.train_frac, "forest.feature_subsample": self.forest.feature_subsample,
                        "boosting.learning_rate": self.boosting.learning_rate}.items():
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {v!r}")
        if self.ridge_eps < 0:
            raise ValueError("ridge_eps must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        if "forest" in d:
            d["forest"] = ForestParams(**d["forest"])
        if "boosting" in d:
            d["boosting"] = BoostingParams(**d["boosting"])
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def config_hash(obj) -> str:
    """Short stable digest of a JSON-serialisable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
