"""Brute-force reference implementations used only by the tests.

These share no code with the package: every cell is enumerated with plain
Python loops and geometry is tested with independent formulations.
"""
import math

import numpy as np
import shapely


def _point_in_ellipse(x, y, cx, cy, ax, ay):
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0


def _segment_hits_ellipse(xa, ya, xb, yb, cx, cy, ax, ay):
    # parametrise the segment and solve the quadratic in normalised space
    ux, uy = (xa - cx) / ax, (ya - cy) / ay
    vx, vy = (xb - xa) / ax, (yb - ya) / ay
    a = vx * vx + vy * vy
    b = 2 * (ux * vx + uy * vy)
    c = ux * ux + uy * uy - 1
    if a == 0:
        return c <= 0
    disc = b * b - 4 * a * c
    if disc < 0:
        return False
    s = math.sqrt(disc)
    t1, t2 = (-b - s) / (2 * a), (-b + s) / (2 * a)
    return t2 >= 0 and t1 <= 1


def rect_meets_ellipse(x0, y0, x1, y1, cx, cy, ax, ay):
    if x0 <= cx <= x1 and y0 <= cy <= y1:
        return True
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    if any(_point_in_ellipse(x, y, cx, cy, ax, ay) for x, y in corners):
        return True
    edges = zip(corners, corners[1:] + corners[:1])
    return any(_segment_hits_ellipse(xa, ya, xb, yb, cx, cy, ax, ay) for (xa, ya), (xb, yb) in edges)


def iter_cells(tiles):
    """Yield (west, south, east, north, value, is_valid) for every cell of every tile."""
    for t in tiles:
        cs = t.cell_size
        top = t.y_ll + t.n_rows * cs
        for r in range(t.n_rows):
            for c in range(t.n_cols):
                v = float(t.values[r, c])
                yield (t.x_ll + c * cs, top - (r + 1) * cs, t.x_ll + (c + 1) * cs, top - r * cs,
                       v, v != t.nodata and not math.isnan(v))


def buffer_mean_oracle(tiles, lat, lon, radius_m):
    dlat = radius_m / 111320.0
    dlon = radius_m / (111320.0 * math.cos(math.radians(lat)))
    vals = [v for x0, y0, x1, y1, v, ok in iter_cells(tiles)
            if ok and rect_meets_ellipse(x0, y0, x1, y1, lon, lat, dlon, dlat)]
    return sum(vals) / len(vals) if vals else None


def polygon_mean_oracle(tiles, exterior, holes=()):
    poly = shapely.Polygon(exterior, holes)
    vals = []
    for x0, y0, x1, y1, v, ok in iter_cells(tiles):
        if ok and poly.contains(shapely.Point((x0 + x1) / 2, (y0 + y1) / 2)):
            vals.append(v)
    return sum(vals) / len(vals) if vals else None


def haversine_km(lat1, lon1, lat2, lon2, radius=6371.0088):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(h))


def exhaustive_best_split(x, y):
    """Best single threshold on 1-D data by trying every midpoint."""
    best = (None, float("inf"))
    xs = sorted(set(x))
    for a, b in zip(xs, xs[1:]):
        t = (a + b) / 2
        left = [yy for xx, yy in zip(x, y) if xx <= t]
        right = [yy for xx, yy in zip(x, y) if xx > t]
        sse = sum((v - np.mean(left)) ** 2 for v in left) + sum((v - np.mean(right)) ** 2 for v in right)
        if sse < best[1]:
            best = (t, sse)
    return best
