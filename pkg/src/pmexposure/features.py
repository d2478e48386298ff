"""Model-ready feature table and site-coherent train/test splits."""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geodata import (GeoPoint, OutOfBoundsError, Polygon, VirtualMosaic, extract_buffer_mean,
                      extract_polygon_mean)
from .ingest import SensorSite, WeeklyRecord

log = logging.getLogger(__name__)

VARIABLES = ("aod", "no2", "precip", "popden")
FEATURE_NAMES = ("aod_local", "aod_city", "no2_local", "no2_city", "precip_local", "precip_city",
                 "popden_local", "popden_city", "lat", "lon")
RASTER_FEATURES = FEATURE_NAMES[:8]
TABLE_HEADER = ["site_id", "week", "lat", "lon", *RASTER_FEATURES, "pm25"]
EARTH_RADIUS_KM = 6371.0088


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureRow:
    site_id: str
    week: dt.date
    lat: float
    lon: float
    x: tuple[float, ...]
    y: float | None = None

    def features(self, names: Sequence[str] = FEATURE_NAMES) -> list[float]:
        lookup = dict(zip(FEATURE_NAMES, self.x))
        return [lookup[n] for n in names]


@dataclass
class FeatureTable:
    rows: list[FeatureRow]
    dropped: Counter = field(default_factory=Counter)

    def matrix(self, names: Sequence[str] = FEATURE_NAMES) -> tuple[np.ndarray, np.ndarray]:
        return feature_matrix(self.rows, names)


def feature_matrix(rows: Sequence[FeatureRow], names: Sequence[str] = FEATURE_NAMES):
    X = np.array([r.features(names) for r in rows], dtype=np.float64).reshape(len(rows), len(names))
    y = np.array([np.nan if r.y is None else r.y for r in rows], dtype=np.float64)
    return X, y


def raster_features(mosaics: Mapping[str, VirtualMosaic], p: GeoPoint, city: Polygon | None,
                    radius_m: float = 75.0, city_cache: dict | None = None):
    """The 8 local/city raster features at ``p``, or a drop reason string.

    With ``city=None`` the city-level features repeat the local ones.
    """
    out = []
    for var in VARIABLES:
        m = mosaics.get(var)
        if m is None:
            return "missing_mosaic"
        try:
            local = extract_buffer_mean(m, p, radius_m)
        except OutOfBoundsError:
            return "out_of_bounds"
        if city is None:
            city_val = local
        else:
            key = (id(m), id(city))
            if city_cache is not None and key in city_cache:
                city_val = city_cache[key]
            else:
                try:
                    city_val = extract_polygon_mean(m, city)
                except OutOfBoundsError:
                    city_val = None
                if city_cache is not None:
                    city_cache[key] = city_val
        if local is None or city_val is None:
            return "nodata"
        out += [local, city_val]
    return tuple(out)


def build_feature_table(records: Sequence[WeeklyRecord], sites: Mapping[str, SensorSite],
                        mosaics: Mapping[tuple[str, str], VirtualMosaic],
                        city_polygons: Mapping[str, Polygon], radius_m: float = 75.0,
                        on_missing_city: str = "error", threads: int = 1) -> FeatureTable:
    """Join weekly targets with local (buffer) and city (polygon) features.

    ``mosaics`` is keyed by ``(variable, ISO week)``.  Rows missing a mosaic
    or hitting no-data are dropped and tallied in ``FeatureTable.dropped``.
    A site whose city has no polygon raises unless ``on_missing_city="drop"``;
    a site lying outside its city's polygon (boundary counts as inside) is
    dropped with a warning.
    """
    if on_missing_city not in ("error", "drop"):
        raise ValueError(f"on_missing_city must be 'error' or 'drop', got {on_missing_city!r}")
    dropped = Counter()
    outside: set[str] = set()
    jobs = []
    for rec in sorted(records, key=lambda r: (r.site_id, r.week)):
        site = sites.get(rec.site_id)
        if site is None:
            raise FeatureError(f"site {rec.site_id!r} missing from the site catalog")
        poly = city_polygons.get(site.city)
        if poly is None:
            if on_missing_city == "error":
                raise FeatureError(f"no city polygon for city {site.city!r} (site {site.site_id})")
            log.warning("dropping site %s: no polygon for city %r", site.site_id, site.city)
            dropped["no_city_polygon"] += 1
            continue
        if not poly.covers(site.location.lat, site.location.lon):
            if site.site_id not in outside:
                log.warning("dropping site %s: outside the %r city polygon", site.site_id, site.city)
                outside.add(site.site_id)
            dropped["outside_city"] += 1
            continue
        jobs.append((rec, site, poly))

    # city means depend only on (variable, week, city): compute each once up front
    cache = {}
    for rec, site, poly in jobs:
        wk = rec.week.isoformat()
        for var in VARIABLES:
            m = mosaics.get((var, wk))
            key = (id(m), id(poly))
            if m is not None and key not in cache:
                try:
                    cache[key] = extract_polygon_mean(m, poly)
                except OutOfBoundsError:
                    cache[key] = None

    def one(job):
        rec, site, poly = job
        wk = rec.week.isoformat()
        week_mosaics = {v: mosaics[(v, wk)] for v in VARIABLES if (v, wk) in mosaics}
        return raster_features(week_mosaics, site.location, poly, radius_m, cache)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]

    rows = []
    for (rec, site, _), feats in zip(jobs, results):
        if isinstance(feats, str):
            dropped[feats] += 1
            continue
        lat, lon = site.location.lat, site.location.lon
        rows.append(FeatureRow(rec.site_id, rec.week, lat, lon, feats + (lat, lon), rec.pm25_avg))
    if dropped:
        log.info("feature table: kept %d rows, dropped %s", len(rows), dict(dropped))
    return FeatureTable(rows, dropped)


def write_feature_csv(rows: Sequence[FeatureRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for r in rows:
            w.writerow([r.site_id, r.week.isoformat(), repr(r.lat), repr(r.lon),
                        *(repr(float(v)) for v in r.x[:8]), "" if r.y is None else repr(float(r.y))])


def read_feature_csv(path) -> list[FeatureRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TABLE_HEADER:
            raise FeatureError(f"{path}: expected header {','.join(TABLE_HEADER)}")
        for rowno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                lat, lon = float(rec[2]), float(rec[3])
                x = tuple(float(v) for v in rec[4:12])
                y = float(rec[12]) if rec[12] else None
                week = dt.date.fromisoformat(rec[1])
            except (ValueError, IndexError) as exc:
                raise FeatureError(f"{path}: row {rowno}: {exc}") from None
            if not all(math.isfinite(v) for v in x + (lat, lon)):
                raise FeatureError(f"{path}: row {rowno}: non-finite feature")
            rows.append(FeatureRow(rec[0], week, lat, lon, x + (lat, lon), y))
    return rows


# ---- splits -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    is_train: np.ndarray
    seed: int
    train_sites: tuple[str, ...]
    test_sites: tuple[str, ...]

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(self.is_train)

    @property
    def test_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.is_train)


def _n_test(n_sites: int, train_frac: float) -> int:
    if not 0 < train_frac <= 1:
        raise FeatureError(f"train_frac must be in (0, 1], got {train_frac}")
    # round away float noise such as 0.8 * 15 = 12.000000000000002
    return n_sites - math.ceil(round(train_frac * n_sites, 9))


def _site_locations(rows) -> dict[str, GeoPoint]:
    locs = {}
    for r in rows:
        locs.setdefault(r.site_id, GeoPoint(r.lat, r.lon))
    if len(locs) < 2:
        raise FeatureError(f"need at least 2 distinct sites to split, got {len(locs)}")
    return locs


def _weighted_split(rows, site_ids, weights, train_frac, seed) -> SplitAssignment:
    # Efraimidis-Spirakis keys: ordering by log(u)/w is a draw without replacement with
    # probability proportional to w, and a plain uniform shuffle when weights are equal.
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(len(site_ids))
    keys = np.log(u) / np.asarray(weights, dtype=np.float64)
    order = np.argsort(-keys, kind="stable")
    k = _n_test(len(site_ids), train_frac)
    test = {site_ids[i] for i in order[:k]}
    is_train = np.array([r.site_id not in test for r in rows], dtype=bool)
    return SplitAssignment(is_train, seed, tuple(s for s in site_ids if s not in test),
                           tuple(s for s in site_ids if s in test))


def split_train_test(rows: Sequence[FeatureRow], train_frac: float = 0.8, seed: int = 0) -> SplitAssignment:
    """Shuffle sites with ``seed``; the first ceil(frac * n_sites) train."""
    site_ids = sorted(_site_locations(rows))
    return _weighted_split(rows, site_ids, np.ones(len(site_ids)), train_frac, seed)


def station_density(sites: Mapping[str, SensorSite | GeoPoint], radius_km: float) -> dict[str, int]:
    """Number of stations (self included) within great-circle ``radius_km``."""
    if radius_km < 0:
        raise ValueError(f"radius_km must be >= 0, got {radius_km}")
    ids = sorted(sites)
    pts = [sites[i].location if isinstance(sites[i], SensorSite) else sites[i] for i in ids]
    lat = np.radians([p.lat for p in pts])
    lon = np.radians([p.lon for p in pts])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2) ** 2 + np.cos(lat[:, None]) * np.cos(lat[None, :]) * np.sin(dlon / 2) ** 2
    dist = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    np.fill_diagonal(dist, 0.0)
    counts = (dist <= radius_km).sum(axis=1)
    return {i: int(c) for i, c in zip(ids, counts)}


def stratified_split(rows: Sequence[FeatureRow], train_frac: float = 0.8, seed: int = 0,
                     radius_km: float = 50.0) -> SplitAssignment:
    """Draw test sites with probability proportional to 1 / station density.

    Isolated stations are favoured for the test set, so validation covers
    sparsely monitored regions.  With ``radius_km=0`` every weight is 1 and
    the result equals :func:`split_train_test` for the same seed.
    """
    locs = _site_locations(rows)
    site_ids = sorted(locs)
    density = station_density(locs, radius_km)
    weights = np.array([1.0 / density[s] for s in site_ids])
    return _weighted_split(rows, site_ids, weights, train_frac, seed)
