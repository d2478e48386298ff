from .config import BoostingParams, ForestParams, TrainConfig, config_hash
from .ensemble import LEAF_WISE, LEVEL_WISE, BoostedModel, ForestModel, fit_forest, fit_gbm
from .linear import LinearModel, fit_linear
from .stacking import (ModelFormatError, StackedModel, base_importances, feature_importance,
                       fit_stacked, load_model, make_folds, predict, save_model)
from .tree import RegressionTree, fit_tree

__all__ = [
    "BoostedModel", "BoostingParams", "ForestModel", "ForestParams", "LEAF_WISE", "LEVEL_WISE",
    "LinearModel", "ModelFormatError", "RegressionTree", "StackedModel", "TrainConfig",
    "base_importances", "config_hash", "feature_importance", "fit_forest", "fit_gbm", "fit_linear",
    "fit_stacked", "fit_tree", "load_model", "make_folds", "predict", "save_model",
]
