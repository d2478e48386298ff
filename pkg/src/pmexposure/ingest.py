"""Sensor measurements: parsing, HTTP acquisition, range filtering, weekly means."""
from __future__ import annotations

import csv
import datetime as dt
import logging
import os
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

from .geodata import GeoDataError, GeoPoint

log = logging.getLogger(__name__)

PM25_MIN = 0.0
PM25_MAX = 3000.0
SENSOR_HEADER = ["site_id", "latitude", "longitude", "city", "country", "timestamp_utc",
                 "parameter", "value", "unit"]
ACCEPTED_UNITS = {"ug/m3", "µg/m³"}
MAX_ATTEMPTS = 3


class IngestError(ValueError):
    pass


class FetchError(IngestError):
    def __init__(self, msg, status=None):
        super().__init__(msg)
        self.status = status


@dataclass(frozen=True)
class Measurement:
    site_id: str
    timestamp: dt.datetime
    pm25: float


@dataclass(frozen=True)
class SensorSite:
    site_id: str
    location: GeoPoint
    city: str
    country: str


@dataclass(frozen=True)
class WeeklyRecord:
    site_id: str
    week: dt.date
    pm25_avg: float
    n_obs: int


@dataclass
class ParseResult:
    measurements: list[Measurement]
    sites: dict[str, SensorSite]
    skipped: int = 0


def parse_timestamp(text: str) -> dt.datetime:
    """ISO-8601 instant as an aware UTC datetime; naive input is taken as UTC."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    t = dt.datetime.fromisoformat(text)
    if t.tzinfo is None:
        return t.replace(tzinfo=dt.timezone.utc)
    return t.astimezone(dt.timezone.utc)


def parse_measurements(path) -> ParseResult:
    """Read the sensor CSV; only ``pm25`` rows become measurements."""
    path = os.fspath(path)
    measurements, sites = [], {}
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SENSOR_HEADER:
            missing = [c for c in SENSOR_HEADER if c not in (header or [])]
            detail = f"missing columns {missing}" if missing else f"header {header}"
            raise IngestError(f"{path}: row 1: expected header {','.join(SENSOR_HEADER)}; {detail}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SENSOR_HEADER):
                raise IngestError(f"{path}: row {rowno}: expected {len(SENSOR_HEADER)} fields, got {len(row)}")
            rec = dict(zip(SENSOR_HEADER, row))
            if rec["parameter"] != "pm25":
                skipped += 1
                continue
            try:
                ts = parse_timestamp(rec["timestamp_utc"])
            except ValueError as exc:
                raise IngestError(f"{path}: row {rowno}: bad timestamp {rec['timestamp_utc']!r}: {exc}") from None
            try:
                value = float(rec["value"])
                lat, lon = float(rec["latitude"]), float(rec["longitude"])
            except ValueError:
                raise IngestError(f"{path}: row {rowno}: non-numeric value or coordinate") from None
            if not np.isfinite(value):
                raise IngestError(f"{path}: row {rowno}: non-finite value {rec['value']!r}")
            if rec["unit"] not in ACCEPTED_UNITS:
                raise IngestError(f"{path}: row {rowno}: unsupported unit {rec['unit']!r} (need ug/m3)")
            try:
                site = SensorSite(rec["site_id"], GeoPoint(lat, lon), rec["city"], rec["country"])
            except GeoDataError as exc:
                raise IngestError(f"{path}: row {rowno}: {exc}") from None
            known = sites.setdefault(site.site_id, site)
            if known != site:
                raise IngestError(f"{path}: row {rowno}: site {site.site_id!r} redefined with different metadata")
            measurements.append(Measurement(rec["site_id"], ts, value))
    if skipped:
        log.info("skipped %d non-pm25 rows in %s", skipped, path)
    return ParseResult(measurements, sites, skipped)


def _get_with_retry(client, url, params, sleep, backoff):
    last_status, last_error = None, None
    for attempt in range(MAX_ATTEMPTS):
        if attempt:
            sleep(backoff * 2 ** (attempt - 1))
        try:
            resp = client.get(url, params=params)
        except httpx.TransportError as exc:
            last_error, last_status = exc, None
            log.warning("page %s attempt %d failed: %s", params["page"], attempt + 1, exc)
            continue
        if resp.status_code < 400:
            return resp
        last_status = resp.status_code
        last_error = None
        log.warning("page %s attempt %d returned HTTP %d", params["page"], attempt + 1, last_status)
    if last_status is not None:
        raise FetchError(f"GET {url} page {params['page']} failed with HTTP {last_status}", last_status)
    raise FetchError(f"GET {url} page {params['page']} failed: {last_error}")


def fetch_measurements(base_url: str, date_from: dt.date, date_to: dt.date, page_size: int = 100,
                       client: httpx.Client | None = None,
                       sleep: Callable[[float], None] = time.sleep,
                       backoff: float = 1.0,
                       sites: dict[str, SensorSite] | None = None) -> list[Measurement]:
    """Page through an OpenAQ-style ``/measurements`` endpoint.

    Pages are fetched in order until one comes back shorter than
    ``page_size``.  Each page gets up to three attempts with exponential
    backoff; a page still failing raises :class:`FetchError` carrying the
    last HTTP status.  If ``sites`` is given, it is filled from results that
    carry ``coordinates``.
    """
    if page_size < 1:
        raise IngestError(f"page_size must be >= 1, got {page_size}")
    own = client is None
    client = client or httpx.Client(timeout=30.0)
    url = base_url.rstrip("/") + "/measurements"
    out = []
    try:
        page = 1
        while True:
            params = {"date_from": str(date_from), "date_to": str(date_to),
                      "page": page, "limit": page_size}
            resp = _get_with_retry(client, url, params, sleep, backoff)
            try:
                results = resp.json()["results"]
                batch = [_measurement_from_json(r) for r in results]
                if sites is not None:
                    for r, m in zip(results, batch):
                        if m is not None and m.site_id not in sites and r.get("coordinates"):
                            c = r["coordinates"]
                            sites[m.site_id] = SensorSite(m.site_id, GeoPoint(float(c["latitude"]),
                                                                              float(c["longitude"])),
                                                          str(r.get("city") or ""), str(r.get("country") or ""))
            except (ValueError, KeyError, TypeError) as exc:
                raise FetchError(f"malformed JSON body on page {page}: {exc}", resp.status_code) from None
            out.extend(m for m in batch if m is not None)
            if len(results) < page_size:
                break
            page += 1
    finally:
        if own:
            client.close()
    return out


def _measurement_from_json(r: dict) -> Measurement | None:
    if r["parameter"] != "pm25":
        return None
    if r["unit"] not in ACCEPTED_UNITS:
        raise ValueError(f"unsupported unit {r['unit']!r}")
    value = float(r["value"])
    if not np.isfinite(value):
        raise ValueError(f"non-finite value {r['value']!r}")
    return Measurement(str(r["location"]), parse_timestamp(r["date"]["utc"]), value)


def filter_valid(ms: Iterable[Measurement]) -> list[Measurement]:
    """Keep readings with 0 <= pm25 <= 3000 (both bounds inclusive)."""
    return [m for m in ms if PM25_MIN <= m.pm25 <= PM25_MAX]


def week_of(t: dt.datetime | dt.date) -> dt.date:
    """Monday starting the UTC week containing ``t``."""
    if isinstance(t, dt.datetime):
        if t.tzinfo is not None:
            t = t.astimezone(dt.timezone.utc)
        t = t.date()
    return t - dt.timedelta(days=t.weekday())


def weekly_resample(ms: Iterable[Measurement]) -> list[WeeklyRecord]:
    groups = defaultdict(list)
    for m in ms:
        groups[(m.site_id, week_of(m.timestamp))].append(m.pm25)
    return [WeeklyRecord(site, week, float(np.mean(vals)), len(vals))
            for (site, week), vals in sorted(groups.items())]


def descriptive_stats(xs: Sequence[float]) -> dict[str, float]:
    """Mean, sample SD (n-1), median and 75th percentile (linear interpolation).

    A single observation has SD 0.
    """
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise ValueError("descriptive_stats of an empty sample")
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    median, q75 = np.percentile(x, [50, 75])
    return {"mean": float(x.mean()), "sd": sd, "median": float(median), "q75": float(q75),
            "n": int(x.size)}


WEEKLY_HEADER = ["site_id", "week", "pm25_avg", "n_obs"]
SITES_HEADER = ["site_id", "latitude", "longitude", "city", "country"]


def write_weekly_csv(records: Sequence[WeeklyRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WEEKLY_HEADER)
        for r in records:
            w.writerow([r.site_id, r.week.isoformat(), repr(r.pm25_avg), r.n_obs])


def read_weekly_csv(path) -> list[WeeklyRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != WEEKLY_HEADER:
            raise IngestError(f"{path}: expected header {','.join(WEEKLY_HEADER)}")
        for rowno, row in enumerate(reader, start=2):
            try:
                out.append(WeeklyRecord(row["site_id"], dt.date.fromisoformat(row["week"]),
                                        float(row["pm25_avg"]), int(row["n_obs"])))
            except ValueError as exc:
                raise IngestError(f"{path}: row {rowno}: {exc}") from None
    return out


def write_sites_csv(sites: dict[str, SensorSite], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SITES_HEADER)
        for sid in sorted(sites):
            s = sites[sid]
            w.writerow([s.site_id, repr(s.location.lat), repr(s.location.lon), s.city, s.country])


def read_sites_csv(path) -> dict[str, SensorSite]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SITES_HEADER:
            raise IngestError(f"{path}: expected header {','.join(SITES_HEADER)}")
        for rowno, row in enumerate(reader, start=2):
            try:
                loc = GeoPoint(float(row["latitude"]), float(row["longitude"]))
            except (ValueError, GeoDataError) as exc:
                raise IngestError(f"{path}: row {rowno}: {exc}") from None
            if row["site_id"] in out:
                raise IngestError(f"{path}: row {rowno}: duplicate site {row['site_id']!r}")
            out[row["site_id"]] = SensorSite(row["site_id"], loc, row["city"], row["country"])
    return out
