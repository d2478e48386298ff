"""Raster tiles, virtual mosaics and zonal means.

Grids are read from ESRI ASCII files (north row first).  A
:class:`VirtualMosaic` presents several abutting tiles as one dataset
without copying their cells, so extraction near a tile seam sees cells from
every tile it touches.

Cell footprints are half-open: a point lying on an edge shared by two cells
belongs to the cell to the north / west of that edge.  The outer edge of a
mosaic is closed.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

METERS_PER_DEGREE = 111320.0
MAX_BUFFER_LAT = 89.9
HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class GeoDataError(ValueError):
    pass


class GridParseError(GeoDataError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class OutOfBoundsError(GeoDataError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise GeoDataError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise GeoDataError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise GeoDataError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """A square-celled grid in geographic degrees.

    ``values`` has shape ``(n_rows, n_cols)`` with row 0 the northernmost.
    """

    values: np.ndarray
    x_ll: float
    y_ll: float
    cell_size: float
    nodata: float = -9999.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise GeoDataError(f"grid values must be a non-empty 2-D array, got shape {values.shape}")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise GeoDataError(f"cell_size must be positive, got {self.cell_size}")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def x_max(self) -> float:
        return self.x_ll + self.n_cols * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y_ll + self.n_rows * self.cell_size

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in degrees, x = longitude."""
        return (self.x_ll, self.y_ll, self.x_max, self.y_max)

    @property
    def valid(self) -> np.ndarray:
        return (self.values != self.nodata) & ~np.isnan(self.values)

    def cell_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-column west/east edges and per-row south/north edges."""
        cols = np.arange(self.n_cols)
        rows = np.arange(self.n_rows)
        x0 = self.x_ll + cols * self.cell_size
        x1 = self.x_ll + (cols + 1) * self.cell_size
        y1 = self.y_max - rows * self.cell_size
        y0 = self.y_max - (rows + 1) * self.cell_size
        return x0, x1, y0, y1

    def contains(self, lat, lon) -> np.ndarray:
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        return (lon >= self.x_ll) & (lon <= self.x_max) & (lat >= self.y_ll) & (lat <= self.y_max)

    def owns(self, lat, lon) -> np.ndarray:
        """Half-open ownership: west edge and north edge excluded."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        return (lon > self.x_ll) & (lon <= self.x_max) & (lat >= self.y_ll) & (lat < self.y_max)

    def locate(self, lat, lon) -> tuple[np.ndarray, np.ndarray]:
        """Row/column of the cell holding each point (points assumed inside)."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        col = np.ceil((lon - self.x_ll) / self.cell_size).astype(np.int64) - 1
        row = np.ceil((self.y_max - lat) / self.cell_size).astype(np.int64) - 1
        return np.clip(row, 0, self.n_rows - 1), np.clip(col, 0, self.n_cols - 1)

    def lookup(self, lat, lon) -> np.ndarray:
        """Vectorised cell lookup; NaN for points outside or on NODATA cells."""
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
        lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
        out = np.full(lat.shape, np.nan)
        inside = self.contains(lat, lon)
        if inside.any():
            r, c = self.locate(lat[inside], lon[inside])
            vals = self.values[r, c]
            ok = self.valid[r, c]
            out[np.flatnonzero(inside)[ok]] = vals[ok]
        return out


def _parse_number(token, path, lineno):
    try:
        return float(token)
    except ValueError:
        raise GridParseError(path, lineno, f"non-numeric value {token!r}") from None


def load_grid(path) -> RasterGrid:
    """Read an ESRI ASCII grid."""
    path = os.fspath(path)
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()

    header = {}
    lineno = 0
    while len(header) < len(HEADER_KEYS):
        if lineno >= len(lines):
            raise GridParseError(path, lineno, "truncated header")
        parts = lines[lineno].split()
        lineno += 1
        if len(parts) != 2:
            raise GridParseError(path, lineno, f"malformed header line {lines[lineno - 1]!r}")
        key = parts[0].lower()
        if key not in HEADER_KEYS:
            raise GridParseError(path, lineno, f"unknown header key {parts[0]!r}")
        if key in header:
            raise GridParseError(path, lineno, f"duplicate header key {parts[0]!r}")
        header[key] = _parse_number(parts[1], path, lineno)

    n_cols, n_rows = header["ncols"], header["nrows"]
    if n_cols != int(n_cols) or n_rows != int(n_rows) or n_cols < 1 or n_rows < 1:
        raise GridParseError(path, 1, f"invalid dimensions ncols={n_cols} nrows={n_rows}")
    n_cols, n_rows = int(n_cols), int(n_rows)

    values = np.empty((n_rows, n_cols))
    row = 0
    for idx in range(lineno, len(lines)):
        parts = lines[idx].split()
        if not parts:
            continue
        if row >= n_rows:
            raise GridParseError(path, idx + 1, f"more than nrows={n_rows} data rows")
        if len(parts) != n_cols:
            raise GridParseError(path, idx + 1, f"expected {n_cols} values, found {len(parts)}")
        values[row] = [_parse_number(t, path, idx + 1) for t in parts]
        row += 1
    if row != n_rows:
        raise GridParseError(path, len(lines), f"expected {n_rows} data rows, found {row}")

    if header["cellsize"] <= 0:
        raise GridParseError(path, 1, f"cellsize must be positive, got {header['cellsize']}")
    return RasterGrid(values, header["xllcorner"], header["yllcorner"], header["cellsize"],
                      header["nodata_value"])


def write_grid(grid: RasterGrid, path) -> None:
    """Write ``grid`` as an ESRI ASCII grid; values use shortest round-trip repr."""
    def fmt(v):
        v = float(v)
        return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)

    lines = [
        f"ncols {grid.n_cols}",
        f"nrows {grid.n_rows}",
        f"xllcorner {fmt(grid.x_ll)}",
        f"yllcorner {fmt(grid.y_ll)}",
        f"cellsize {fmt(grid.cell_size)}",
        f"NODATA_value {fmt(grid.nodata)}",
    ]
    lines += [" ".join(fmt(v) for v in row) for row in grid.values]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class VirtualMosaic:
    """Non-overlapping tiles presented as a single raster variable."""

    tiles: tuple[RasterGrid, ...]
    variable: str = ""
    week: str | None = None
    sources: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        tiles = tuple(self.tiles)
        object.__setattr__(self, "tiles", tiles)
        if not tiles:
            raise GeoDataError("mosaic has no tiles")
        for i, a in enumerate(tiles):
            for b in tiles[i + 1:]:
                tol = 1e-9 * min(a.cell_size, b.cell_size)
                dx = min(a.x_max, b.x_max) - max(a.x_ll, b.x_ll)
                dy = min(a.y_max, b.y_max) - max(a.y_ll, b.y_ll)
                if dx > tol and dy > tol:
                    raise GeoDataError(
                        f"tiles overlap in mosaic {self.variable!r}: {a.bounds} and {b.bounds}")

    @classmethod
    def from_grid(cls, grid: RasterGrid, variable: str = "", week: str | None = None):
        return cls((grid,), variable, week)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (min(t.x_ll for t in self.tiles), min(t.y_ll for t in self.tiles),
                max(t.x_max for t in self.tiles), max(t.y_max for t in self.tiles))

    def tile_for(self, lat: float, lon: float) -> RasterGrid:
        """The tile owning a point; raises OutOfBoundsError when none does."""
        fallback = None
        for tile in self.tiles:
            if tile.owns(lat, lon):
                return tile
            if fallback is None and tile.contains(lat, lon):
                fallback = tile
        if fallback is None:
            raise OutOfBoundsError(f"point ({lat}, {lon}) outside mosaic {self.variable!r}")
        return fallback


def load_mosaic(manifest_path) -> VirtualMosaic:
    """Load a mosaic manifest; tile paths are relative to the manifest."""
    manifest_path = os.fspath(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GeoDataError(f"{manifest_path}: invalid manifest JSON: {exc}") from None
    for key in ("variable", "week", "tiles"):
        if key not in doc:
            raise GeoDataError(f"{manifest_path}: manifest missing {key!r}")
    base = os.path.dirname(manifest_path)
    paths = [os.path.join(base, p) for p in doc["tiles"]]
    return VirtualMosaic(tuple(load_grid(p) for p in paths), doc["variable"], doc["week"],
                         tuple(paths))


def load_mosaic_dir(directory) -> dict[tuple[str, str], VirtualMosaic]:
    """Every ``*.json`` manifest in ``directory`` keyed by (variable, week)."""
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".json"):
            m = load_mosaic(os.path.join(directory, name))
            key = (m.variable, m.week)
            if key in out:
                raise GeoDataError(f"duplicate mosaic for variable {m.variable!r} week {m.week}")
            out[key] = m
    return out


def write_mosaic_manifest(path, variable: str, week: str, tile_paths: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"variable": variable, "week": week, "tiles": list(tile_paths)}, fh, indent=2)
        fh.write("\n")


def sample_at(mosaic: VirtualMosaic, p: GeoPoint) -> float | None:
    """Value of the cell containing ``p``; ``None`` on a NODATA cell."""
    tile = mosaic.tile_for(p.lat, p.lon)
    r, c = tile.locate(p.lat, p.lon)
    r, c = int(r), int(c)
    if not tile.valid[r, c]:
        return None
    return float(tile.values[r, c])


def buffer_degrees(lat: float, radius_m: float) -> tuple[float, float]:
    """Small-angle conversion of a metric radius to (dlat, dlon) in degrees."""
    if not abs(lat) < MAX_BUFFER_LAT:
        raise GeoDataError(f"latitude {lat} too close to a pole for a metric buffer")
    if not radius_m > 0:
        raise GeoDataError(f"buffer radius must be positive, got {radius_m}")
    dlat = radius_m / METERS_PER_DEGREE
    dlon = radius_m / (METERS_PER_DEGREE * math.cos(math.radians(lat)))
    return dlat, dlon


def _mean_or_none(chunks: list[np.ndarray]) -> float | None:
    if not chunks:
        return None
    vals = np.concatenate(chunks)
    if vals.size == 0:
        return None
    return float(vals.sum() / vals.size)


def extract_buffer_mean(mosaic: VirtualMosaic, p: GeoPoint, radius_m: float = 75.0) -> float | None:
    """Unweighted mean of valid cells whose footprint touches the buffer ellipse.

    Returns ``None`` when every touched cell is NODATA.
    """
    mosaic.tile_for(p.lat, p.lon)
    dlat, dlon = buffer_degrees(p.lat, radius_m)
    chunks = []
    for tile in mosaic.tiles:
        x0, x1, y0, y1 = tile.cell_edges()
        cols = np.flatnonzero((x1 >= p.lon - dlon) & (x0 <= p.lon + dlon))
        rows = np.flatnonzero((y1 >= p.lat - dlat) & (y0 <= p.lat + dlat))
        if cols.size == 0 or rows.size == 0:
            continue
        # nearest point of each footprint to the centre, in ellipse-normalised units
        qx = (np.clip(p.lon, x0[cols], x1[cols]) - p.lon) / dlon
        qy = (np.clip(p.lat, y0[rows], y1[rows]) - p.lat) / dlat
        hit = qy[:, None] ** 2 + qx[None, :] ** 2 <= 1.0
        sub = tile.values[np.ix_(rows, cols)]
        ok = hit & tile.valid[np.ix_(rows, cols)]
        chunks.append(sub[ok])
    return _mean_or_none(chunks)


@dataclass(frozen=True, eq=False)
class Polygon:
    """Closed exterior ring plus optional holes; vertices are (lon, lat)."""

    exterior: np.ndarray
    holes: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        rings = [np.asarray(self.exterior, dtype=np.float64)]
        rings += [np.asarray(h, dtype=np.float64) for h in self.holes]
        for ring in rings:
            if ring.ndim != 2 or ring.shape[1] != 2:
                raise GeoDataError("polygon ring must be an array of (lon, lat) pairs")
            if ring.shape[0] < 4:
                raise GeoDataError(f"polygon ring needs >= 4 vertices, got {ring.shape[0]}")
            if not np.array_equal(ring[0], ring[-1]):
                raise GeoDataError("polygon ring is not closed (first vertex != last vertex)")
            if not np.isfinite(ring).all():
                raise GeoDataError("polygon ring has non-finite coordinates")
            if _self_intersects(ring):
                raise GeoDataError("polygon ring self-intersects")
        object.__setattr__(self, "exterior", rings[0])
        object.__setattr__(self, "holes", tuple(rings[1:]))

    @classmethod
    def from_points(cls, exterior: Iterable[GeoPoint], holes: Iterable[Iterable[GeoPoint]] = ()):
        def ring(pts):
            return np.array([[p.lon, p.lat] for p in pts])
        return cls(ring(exterior), tuple(ring(h) for h in holes))

    @classmethod
    def from_geojson(cls, geometry: dict) -> "Polygon":
        if geometry.get("type") != "Polygon":
            raise GeoDataError(f"expected a Polygon geometry, got {geometry.get('type')!r}")
        rings = geometry["coordinates"]
        return cls(np.array(rings[0]), tuple(np.array(r) for r in rings[1:]))

    @property
    def rings(self) -> tuple[np.ndarray, ...]:
        return (self.exterior,) + self.holes

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        xs, ys = self.exterior[:, 0], self.exterior[:, 1]
        return (xs.min(), ys.min(), xs.max(), ys.max())

    def contains(self, lat, lon) -> np.ndarray:
        """Even-odd containment over all rings."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        inside = np.zeros(np.broadcast(lat, lon).shape, dtype=bool)
        for ring in self.rings:
            for (xa, ya), (xb, yb) in zip(ring[:-1], ring[1:]):
                if ya == yb:
                    continue
                crosses = (ya > lat) != (yb > lat)
                x_at = xa + (lat - ya) * (xb - xa) / (yb - ya)
                inside ^= crosses & (lon < x_at)
        return inside


    def covers(self, lat: float, lon: float) -> bool:
        """Containment with the boundary counted as inside (holes' edges too)."""
        if bool(self.contains(lat, lon)):
            return True
        for ring in self.rings:
            a, b = ring[:-1], ring[1:]
            d = b - a
            scale = max(1.0, float(np.abs(ring).max()))
            cross = d[:, 0] * (lat - a[:, 1]) - d[:, 1] * (lon - a[:, 0])
            within = ((np.minimum(a[:, 0], b[:, 0]) <= lon) & (lon <= np.maximum(a[:, 0], b[:, 0]))
                      & (np.minimum(a[:, 1], b[:, 1]) <= lat) & (lat <= np.maximum(a[:, 1], b[:, 1])))
            if np.any(within & (np.abs(cross) <= 1e-12 * scale * np.maximum(1.0, np.abs(d).max(axis=1)))):
                return True
        return False

def _self_intersects(ring: np.ndarray) -> bool:
    a, b = ring[:-1], ring[1:]
    n = len(a)
    if n < 4:
        return False

    def orient(p, q, r):
        return np.sign((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                       - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    p1, p2, q1, q2 = a[i], b[i], a[j], b[j]
    d1, d2 = orient(p1, p2, q1), orient(p1, p2, q2)
    d3, d4 = orient(q1, q2, p1), orient(q1, q2, p2)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    return bool(proper.any())


def extract_polygon_mean(mosaic: VirtualMosaic, poly: Polygon) -> float | None:
    """Unweighted mean of valid cells whose centre lies inside ``poly``."""
    px0, py0, px1, py1 = poly.bounds
    touched = False
    chunks = []
    for tile in mosaic.tiles:
        if px1 < tile.x_ll or px0 > tile.x_max or py1 < tile.y_ll or py0 > tile.y_max:
            continue
        touched = True
        half = 0.5 * tile.cell_size
        cx = tile.x_ll + (np.arange(tile.n_cols) + 0.5) * tile.cell_size
        cy = tile.y_max - (np.arange(tile.n_rows) + 0.5) * tile.cell_size
        cols = np.flatnonzero((cx >= px0 - half) & (cx <= px1 + half))
        rows = np.flatnonzero((cy >= py0 - half) & (cy <= py1 + half))
        if cols.size == 0 or rows.size == 0:
            continue
        lon, lat = np.meshgrid(cx[cols], cy[rows])
        inside = poly.contains(lat, lon) & tile.valid[np.ix_(rows, cols)]
        chunks.append(tile.values[np.ix_(rows, cols)][inside])
    if not touched:
        raise OutOfBoundsError(f"polygon with bounds {poly.bounds} is disjoint from mosaic "
                               f"{mosaic.variable!r}")
    return _mean_or_none(chunks)


def load_city_polygons(path) -> dict[str, Polygon]:
    """City polygons from a GeoJSON FeatureCollection with a ``city`` property."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise GeoDataError(f"{path}: expected a FeatureCollection")
    out = {}
    for i, feat in enumerate(doc.get("features", [])):
        city = (feat.get("properties") or {}).get("city")
        if not city:
            raise GeoDataError(f"{path}: feature {i} has no 'city' property")
        if city in out:
            raise GeoDataError(f"{path}: duplicate city {city!r}")
        out[city] = Polygon.from_geojson(feat["geometry"])
    return out
