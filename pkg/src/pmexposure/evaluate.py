"""Regression metrics, grouped breakdowns and AQI-category F1 scoring."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

UNDEFINED = "undefined"


@dataclass(frozen=True)
class Metrics:
    rmse: float
    r2: float  # -inf marks an undefined value
    median_ae: float
    n: int

    @property
    def r2_defined(self) -> bool:
        return math.isfinite(self.r2)

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "r2": self.r2 if self.r2_defined else UNDEFINED,
                "median_ae": self.median_ae, "n": self.n}


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("cannot score an empty prediction set")
    return p, t


def regression_metrics(pred, truth) -> Metrics:
    p, t = _pair(pred, truth)
    resid = p - t
    ss_res = float(resid @ resid)
    dev = t - t.mean()
    ss_tot = float(dev @ dev)
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else -math.inf
    return Metrics(math.sqrt(ss_res / p.size), r2, float(np.median(np.abs(resid))), int(p.size))


def per_group_metrics(pred, truth, groups: Sequence[Hashable]) -> dict:
    """Metrics per group label, in sorted label order.  Groups of one row get an undefined r2."""
    p, t = _pair(pred, truth)
    if len(groups) != p.size:
        raise ValueError(f"{len(groups)} group labels for {p.size} predictions")
    labels = np.asarray(groups, dtype=object)
    out = {}
    for g in sorted(set(groups)):
        mask = labels == g
        m = regression_metrics(p[mask], t[mask])
        if m.n < 2:
            m = Metrics(m.rmse, -math.inf, m.median_ae, m.n)
        out[g] = m
    return out


class AqiCategory(enum.IntEnum):
    Good = 0
    Moderate = 1
    UnhealthySensitive = 2
    Unhealthy = 3
    VeryUnhealthy = 4
    Hazardous = 5


# upper bounds (inclusive) of the 24-hour PM2.5 breakpoints
DEFAULT_BREAKPOINTS: tuple[tuple[float, AqiCategory], ...] = (
    (12.0, AqiCategory.Good),
    (35.4, AqiCategory.Moderate),
    (55.4, AqiCategory.UnhealthySensitive),
    (150.4, AqiCategory.Unhealthy),
    (250.4, AqiCategory.VeryUnhealthy),
    (math.inf, AqiCategory.Hazardous),
)


def load_breakpoints(path) -> tuple[tuple[float, AqiCategory], ...]:
    """Read ``[{"upper": value, "category": name}, ...]`` in ascending order."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list) or not doc:
        raise ValueError(f"{path}: breakpoint table must be a non-empty JSON list")
    table = []
    for i, entry in enumerate(doc):
        try:
            upper = math.inf if entry["upper"] is None else float(entry["upper"])
            cat = AqiCategory[entry["category"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: bad breakpoint entry {i}: {exc!r}") from None
        if table and (upper <= table[-1][0] or cat < table[-1][1]):
            raise ValueError(f"{path}: breakpoints must ascend (entry {i})")
        table.append((upper, cat))
    if table[-1][0] != math.inf:
        table.append((math.inf, AqiCategory.Hazardous))
    return tuple(table)


def aqi_classify(pm25: float, breakpoints=DEFAULT_BREAKPOINTS) -> AqiCategory:
    pm25 = float(pm25)
    if not pm25 >= 0:
        raise ValueError(f"PM2.5 concentration must be non-negative, got {pm25}")
    for upper, cat in breakpoints:
        if pm25 <= upper:
            return cat
    return breakpoints[-1][1]


def classification_f1(pred_cats: Sequence, true_cats: Sequence) -> dict:
    """Per-class F1 over every label seen, and the macro mean over labels present in the truth."""
    if len(pred_cats) != len(true_cats):
        raise ValueError(f"length mismatch: {len(pred_cats)} vs {len(true_cats)}")
    if not len(true_cats):
        raise ValueError("cannot score an empty label set")
    pred, true = list(pred_cats), list(true_cats)
    per_class = {}
    for c in sorted(set(pred) | set(true)):
        tp = sum(p == c and t == c for p, t in zip(pred, true))
        n_pred = sum(p == c for p in pred)
        n_true = sum(t == c for t in true)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_true if n_true else 0.0
        per_class[c] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    present = sorted(set(true))
    return {"per_class_f1": per_class, "macro_f1": float(np.mean([per_class[c] for c in present]))}


def aqi_f1(pred, truth, breakpoints=DEFAULT_BREAKPOINTS) -> dict:
    p, t = _pair(pred, truth)
    # negative model outputs are floored at zero before lookup
    pc = [aqi_classify(max(v, 0.0), breakpoints) for v in p]
    tc = [aqi_classify(v, breakpoints) for v in t]
    res = classification_f1(pc, tc)
    return {"per_class_f1": {c.name: v for c, v in res["per_class_f1"].items()}, "macro_f1": res["macro_f1"]}


def evaluation_report(pred, truth, groups: Iterable[Hashable] | None = None, group_key: str = "country",
                      breakpoints=DEFAULT_BREAKPOINTS, extra: Mapping | None = None) -> dict:
    report = {"global": regression_metrics(pred, truth).to_dict()}
    if groups is not None:
        report[f"by_{group_key}"] = {str(g): m.to_dict()
                                     for g, m in per_group_metrics(pred, truth, list(groups)).items()}
    report["aqi_f1"] = aqi_f1(pred, truth, breakpoints)
    if extra:
        report.update(extra)
    return report
