"""Global land sampling, gridded prediction and child-exposure accounting.

The short-term guideline is checked against weekly means, the finest time
step the pipeline produces.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import FEATURE_NAMES, RASTER_FEATURES, VARIABLES, raster_features
from .geodata import GeoPoint, OutOfBoundsError, Polygon, RasterGrid, VirtualMosaic, extract_polygon_mean

SHORT_TERM_PROXY_NOTE = "24-hour guideline applied to weekly mean predictions"
INSUFFICIENT = "insufficient data"
WEEKS_PER_YEAR = 52


class ExposureError(ValueError):
    pass


@dataclass(frozen=True)
class WhoThresholds:
    annual_mean_limit: float = 10.0
    short_term_limit: float = 25.0

    def __post_init__(self):
        if not (self.annual_mean_limit > 0 and self.short_term_limit > 0):
            raise ExposureError("WHO thresholds must be positive")

    def to_dict(self) -> dict:
        return {"annual_mean_limit": self.annual_mean_limit, "short_term_limit": self.short_term_limit}


# ---- land sampling -------------------------------------------------------------

def sample_land_points(n: int, land_mask: RasterGrid, seed: int = 0, batch: int = 65536,
                       within_mask_extent: bool = False) -> np.ndarray:
    """``n`` area-uniform points on land as an ``(n, 2)`` array of (lat, lon).

    Candidates are drawn uniformly on the sphere and kept when their mask
    cell equals 1.  At most ``1000 * n`` candidates are drawn.  The result
    depends only on ``seed``, not on ``batch``.

    With ``within_mask_extent`` the candidates are drawn area-uniformly inside
    the mask's bounding box instead of over the whole globe, which suits
    regional masks.
    """
    if n < 1:
        raise ExposureError(f"n must be >= 1, got {n}")
    if not np.any(land_mask.values == 1):
        raise ExposureError("land mask has no land cells; sampling budget would be exhausted")
    if within_mask_extent:
        x0, y0, x1, y1 = land_mask.bounds
        lon0, lon_span = x0, x1 - x0
        z0, z1 = math.sin(math.radians(max(y0, -90.0))), math.sin(math.radians(min(y1, 90.0)))
    else:
        lon0, lon_span, z0, z1 = -180.0, 360.0, -1.0, 1.0
    rng = np.random.default_rng(seed)
    budget = 1000 * n
    drawn = 0
    found: list[np.ndarray] = []
    n_found = 0
    while n_found < n:
        if drawn >= budget:
            raise ExposureError(f"sampling budget of {budget} draws exhausted after {n_found}/{n} land points")
        k = min(batch, budget - drawn)
        u = rng.random((k, 2))
        drawn += k
        lon = lon0 + lon_span * u[:, 0]
        lat = np.degrees(np.arcsin(np.clip(z0 + (z1 - z0) * u[:, 1], -1.0, 1.0)))
        keep = land_mask.lookup(lat, lon) == 1
        if keep.any():
            pts = np.column_stack([lat[keep], lon[keep]])
            found.append(pts)
            n_found += len(pts)
    return np.concatenate(found)[:n]


# ---- prediction ----------------------------------------------------------------

def mosaics_for_week(mosaics: Mapping[tuple[str, str], VirtualMosaic], week: str) -> dict[str, VirtualMosaic]:
    """Select the per-variable mosaics of one week, naming what is missing."""
    out = {}
    for var in VARIABLES:
        m = mosaics.get((var, week))
        if m is None:
            have = sorted({w for v, w in mosaics if v == var})
            raise ExposureError(f"no {var} mosaic for week {week}; available weeks: "
                                f"{', '.join(have) if have else 'none'}")
        out[var] = m
    return out


@dataclass
class GridPrediction:
    pm25: np.ndarray  # NaN where any feature is no-data
    reasons: Counter = field(default_factory=Counter)

    @property
    def n_nodata(self) -> int:
        return int(np.isnan(self.pm25).sum())


def city_of(lat: float, lon: float, city_polygons: Mapping[str, Polygon] | None) -> Polygon | None:
    """First city (in name order) whose polygon contains the point."""
    if not city_polygons:
        return None
    for name in sorted(city_polygons):
        if city_polygons[name].covers(lat, lon):
            return city_polygons[name]
    return None


def point_features(mosaics: Mapping[str, VirtualMosaic], points, city_polygons=None, radius_m: float = 75.0,
                   feature_order: Sequence[str] = FEATURE_NAMES, threads: int = 1):
    """Feature matrix for ``points`` plus a per-row drop reason (None when usable)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    unknown = set(feature_order) - set(FEATURE_NAMES)
    if unknown:
        raise ExposureError(f"model uses unknown features {sorted(unknown)}")
    cache: dict = {}

    def one(i):
        lat, lon = float(pts[i, 0]), float(pts[i, 1])
        try:
            p = GeoPoint(lat, lon)
        except ValueError:
            return "out_of_bounds"
        return raster_features(mosaics, p, city_of(lat, lon, city_polygons), radius_m, cache)

    # city means are cached per polygon; fill them once so worker threads only read
    for poly in (city_polygons or {}).values():
        for m in mosaics.values():
            if (id(m), id(poly)) not in cache:
                try:
                    cache[(id(m), id(poly))] = extract_polygon_mean(m, poly)
                except OutOfBoundsError:
                    cache[(id(m), id(poly))] = None

    idx = range(len(pts))
    if threads > 1 and len(pts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, idx, chunksize=max(1, len(pts) // (4 * threads))))
    else:
        results = [one(i) for i in idx]

    X = np.full((len(pts), len(feature_order)), np.nan)
    reasons: list[str | None] = []
    col = {name: j for j, name in enumerate(feature_order)}
    for i, res in enumerate(results):
        if isinstance(res, str):
            reasons.append(res)
            continue
        reasons.append(None)
        values = dict(zip(RASTER_FEATURES, res), lat=pts[i, 0], lon=pts[i, 1])
        for name, j in col.items():
            X[i, j] = values[name]
    return X, reasons


def predict_grid(model, mosaics: Mapping[str, VirtualMosaic], points, city_polygons=None,
                 radius_m: float = 75.0, threads: int = 1) -> GridPrediction:
    """Predict weekly PM2.5 at each (lat, lon) point from one week's mosaics.

    Points outside every city polygon use their local values for the
    city-level features.
    """
    missing = [v for v in VARIABLES if v not in mosaics]
    if missing:
        raise ExposureError(f"missing mosaics for variables {missing}")
    order = getattr(model, "feature_order", FEATURE_NAMES)
    X, reasons = point_features(mosaics, points, city_polygons, radius_m, order, threads)
    ok = np.array([r is None for r in reasons], dtype=bool)
    pred = np.full(len(reasons), np.nan)
    if ok.any():
        pred[ok] = model.predict(X[ok])
    return GridPrediction(pred, Counter(r for r in reasons if r is not None))


# ---- exceedance and exposure ---------------------------------------------------

def who_exceedance(series, thresholds: WhoThresholds = WhoThresholds()) -> dict:
    """Weekly short-term flags and an annual flag for one cell's weekly series.

    ``series`` is either a sequence of consecutive weekly values or a mapping
    from week start dates to values.  The annual flag needs at least 52
    consecutive finite weeks; otherwise it is ``"insufficient data"``.
    """
    if isinstance(series, Mapping):
        weeks = sorted(series)
        values = np.array([series[w] for w in weeks], dtype=np.float64)
        gaps = any((b - a).days != 7 for a, b in zip(weeks, weeks[1:]))
    else:
        values = np.asarray(series, dtype=np.float64).ravel()
        gaps = False
    if values.size == 0:
        raise ExposureError("exceedance needs at least one weekly value")
    short = [bool(v > thresholds.short_term_limit) for v in values]
    if values.size >= WEEKS_PER_YEAR and not gaps and np.isfinite(values).all():
        annual: bool | str = bool(values.mean() > thresholds.annual_mean_limit)
    else:
        annual = INSUFFICIENT
    return {"exceeds_short_term": short, "exceeds_annual": annual}


@dataclass(frozen=True)
class ExposureCell:
    bounds: tuple[float, float, float, float]  # west, south, east, north
    week: str
    pm25_pred: float  # NaN when no prediction was possible
    child_pop: float
    exceeds_short_term: bool
    exceeds_annual: bool | None = None

    def __post_init__(self):
        w, s, e, n = self.bounds
        if not (w < e and s < n):
            raise ExposureError(f"degenerate cell bounds {self.bounds}")
        if not self.child_pop >= 0:
            raise ExposureError(f"child population must be >= 0, got {self.child_pop}")


@dataclass
class ExposureReport:
    cells: list[ExposureCell]
    period: str
    thresholds: WhoThresholds = WhoThresholds()
    metadata: dict = field(default_factory=dict)

    @property
    def totals(self) -> dict:
        exceeding = [c for c in self.cells if c.exceeds_short_term]
        return {"children_exposed": float(sum(c.child_pop for c in exceeding)),
                "cells_exceeding": len(exceeding),
                "cells_nodata": sum(math.isnan(c.pm25_pred) for c in self.cells)}

    def to_dict(self) -> dict:
        return {"period": self.period, "totals": self.totals, "thresholds": self.thresholds.to_dict(),
                "short_term_proxy": SHORT_TERM_PROXY_NOTE, "metadata": self.metadata,
                "cells": [{"bounds": list(c.bounds), "week": c.week, "pm25": _num(c.pm25_pred),
                           "child_pop": c.child_pop, "exceeds_short_term": c.exceeds_short_term,
                           "exceeds_annual": c.exceeds_annual} for c in self.cells]}


def report_from_dict(doc: dict) -> ExposureReport:
    """Inverse of :meth:`ExposureReport.to_dict`."""
    try:
        cells = [ExposureCell(tuple(float(x) for x in c["bounds"]), c["week"],
                              math.nan if c["pm25"] is None else float(c["pm25"]), float(c["child_pop"]),
                              bool(c["exceeds_short_term"]), c.get("exceeds_annual"))
                 for c in doc["cells"]]
        return ExposureReport(cells, doc["period"], WhoThresholds(**doc.get("thresholds", {})),
                              dict(doc.get("metadata", {})))
    except (KeyError, TypeError) as exc:
        raise ExposureError(f"malformed exposure report: {exc!r}") from None


def _num(v: float):
    return None if math.isnan(v) else float(v)


def cells_around(points, size: float = 0.1) -> np.ndarray:
    """Square cells of side ``size`` degrees centred on (lat, lon) points, as (w, s, e, n)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h = size / 2.0
    return np.column_stack([pts[:, 1] - h, pts[:, 0] - h, pts[:, 1] + h, pts[:, 0] + h])


def grid_cells(grid: RasterGrid) -> tuple[np.ndarray, np.ndarray]:
    """Row-major cell centres (lat, lon) and bounds (w, s, e, n) of a raster."""
    cs = grid.cell_size
    rows, cols = np.mgrid[0:grid.n_rows, 0:grid.n_cols]
    west = grid.x_ll + cols.ravel() * cs
    north = grid.y_max - rows.ravel() * cs
    bounds = np.column_stack([west, north - cs, west + cs, north])
    centres = np.column_stack([north - cs / 2, west + cs / 2])
    return centres, bounds


def _overlaps(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def child_exposure(cell_bounds, pm25, child_pop: RasterGrid, thresholds: WhoThresholds = WhoThresholds(),
                   week: str = "", exceeds_annual: Sequence[bool | None] | None = None,
                   metadata: dict | None = None) -> ExposureReport:
    """Attach child population to predicted cells and total the exposed children.

    Each cell takes the population of the raster cell nearest its centre.
    Cells that do not touch the raster get zero; no-data population counts as
    zero.
    """
    cb = np.asarray(cell_bounds, dtype=np.float64).reshape(-1, 4)
    pm = np.asarray(pm25, dtype=np.float64).ravel()
    if len(cb) != len(pm):
        raise ExposureError(f"{len(cb)} cells but {len(pm)} predictions")
    rb = child_pop.bounds  # (x_min, y_min, x_max, y_max)
    if len(cb):
        extent = (cb[:, 0].min(), cb[:, 1].min(), cb[:, 2].max(), cb[:, 3].max())
        if not _overlaps(extent, rb):
            raise ExposureError(f"prediction cells {tuple(map(float, extent))} do not overlap the "
                                f"population raster {rb}")
    cs = child_pop.cell_size
    cells = []
    for i, (b, v) in enumerate(zip(cb, pm)):
        pop = 0.0
        if _overlaps(b, rb):
            lat, lon = (b[1] + b[3]) / 2, (b[0] + b[2]) / 2
            r = min(max(int(math.floor((child_pop.y_max - lat) / cs)), 0), child_pop.n_rows - 1)
            c = min(max(int(math.floor((lon - child_pop.x_ll) / cs)), 0), child_pop.n_cols - 1)
            raw = float(child_pop.values[r, c])
            pop = raw if raw != child_pop.nodata and raw > 0 else 0.0
        annual = None if exceeds_annual is None else exceeds_annual[i]
        cells.append(ExposureCell(tuple(float(x) for x in b), week, float(v), pop,
                                  bool(v > thresholds.short_term_limit), annual))
    return ExposureReport(cells, week, thresholds, dict(metadata or {}))


def compare_periods(a: ExposureReport, b: ExposureReport) -> dict:
    """Per-cell change from ``a`` to ``b`` and counts of threshold crossings."""
    if len(a.cells) != len(b.cells) or any(ca.bounds != cb.bounds for ca, cb in zip(a.cells, b.cells)):
        raise ExposureError("reports cover different cells")
    deltas = [cb.pm25_pred - ca.pm25_pred for ca, cb in zip(a.cells, b.cells)]
    finite = [d for d in deltas if not math.isnan(d)]
    return {
        "period_a": a.period, "period_b": b.period,
        "deltas": [{"bounds": list(c.bounds), "delta": _num(d)} for c, d in zip(a.cells, deltas)],
        "mean_delta": float(np.mean(finite)) if finite else None,
        "cells_newly_exceeding": sum(not ca.exceeds_short_term and cb.exceeds_short_term
                                     for ca, cb in zip(a.cells, b.cells)),
        "cells_recovered": sum(ca.exceeds_short_term and not cb.exceeds_short_term
                               for ca, cb in zip(a.cells, b.cells)),
    }


# ---- GeoJSON -------------------------------------------------------------------

def _ring(b) -> list[list[float]]:
    w, s, e, n = (round(float(x), 6) for x in b)
    return [[w, s], [e, s], [e, n], [w, n], [w, s]]


def report_to_geojson(report: ExposureReport) -> dict:
    features = []
    for c in report.cells:
        props = {"pm25": _num(c.pm25_pred), "child_pop": c.child_pop,
                 "exceeds_short_term": c.exceeds_short_term, "week": c.week}
        if c.exceeds_annual is not None:
            props["exceeds_annual"] = c.exceeds_annual
        features.append({"type": "Feature", "properties": props,
                         "geometry": {"type": "Polygon", "coordinates": [_ring(c.bounds)]}})
    meta = {"period": report.period, "thresholds": report.thresholds.to_dict(), "totals": report.totals,
            "short_term_proxy": SHORT_TERM_PROXY_NOTE, **report.metadata}
    return {"type": "FeatureCollection", "features": features, "metadata": meta}


def dumps_geojson(report: ExposureReport) -> str:
    return json.dumps(report_to_geojson(report), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def export_geojson(report: ExposureReport, path) -> None:
    text = dumps_geojson(report)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise ExposureError(f"cannot write {path}: {exc.strerror}") from None


def read_geojson(path) -> ExposureReport:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ExposureError(f"{path}: not a FeatureCollection")
    meta = dict(doc.get("metadata", {}))
    thr = WhoThresholds(**meta.pop("thresholds", {}))
    period = meta.pop("period", "")
    for k in ("totals", "short_term_proxy"):
        meta.pop(k, None)
    cells = []
    for f in doc["features"]:
        ring = np.asarray(f["geometry"]["coordinates"][0], dtype=np.float64)
        p = f["properties"]
        bounds = (float(ring[:, 0].min()), float(ring[:, 1].min()), float(ring[:, 0].max()),
                  float(ring[:, 1].max()))
        pm = math.nan if p["pm25"] is None else float(p["pm25"])
        cells.append(ExposureCell(bounds, p["week"], pm, float(p["child_pop"]), bool(p["exceeds_short_term"]),
                                  p.get("exceeds_annual")))
    return ExposureReport(cells, period, thr, meta)
