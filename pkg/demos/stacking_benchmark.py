"""
Stacking three tree ensembles
=============================

A random forest and two boosted models (one grown level by level, one leaf
by leaf) are combined by a linear model fitted to out-of-fold predictions.
On a smooth nonlinear target the stack should match or beat its best member.
"""

import time

import numpy as np

from pmexposure.evaluate import regression_metrics
from pmexposure.model import TrainConfig, base_importances, fit_stacked
from pmexposure.synthetic import friedman_like

X, y = friedman_like(n=2000, d=10, noise=0.5, seed=0)
perm = np.random.default_rng(0).permutation(len(y))
train, test = perm[:1600], perm[1600:]

t0 = time.perf_counter()
model = fit_stacked(X[train], y[train], TrainConfig(seed=0))
print(f"fitted in {time.perf_counter() - t0:.1f} s")

# test error of each member and of the stack
for name, column in zip(("forest", "gbm_level", "gbm_leaf"), model.base_predictions(X[test]).T):
    print(f"{name:10s} rmse {regression_metrics(column, y[test]).rmse:.4f}")
m = regression_metrics(model.predict(X[test]), y[test])
print(f"{'stacked':10s} rmse {m.rmse:.4f}  r2 {m.r2:.4f}")
print("meta weights", np.round(model.meta.weights, 3), "intercept", round(model.meta.intercept, 3))

# only the first four inputs carry signal
imp = base_importances(model)["gbm_leaf"]
for name, v in sorted(imp.items(), key=lambda kv: -kv[1])[:5]:
    print(f"  {name:4s} {v:.3f}")
