"""Seeded synthetic data: the nonlinear regression benchmark and a toy project.

The toy project is a complete, tiny input set for the command-line pipeline
(sensor CSV, weekly mosaics, city polygons, land mask and child population)
so every stage can run end-to-end without external data.
"""
from __future__ import annotations

import datetime as dt
import json
import os

import numpy as np

from .geodata import RasterGrid, write_grid, write_mosaic_manifest


def friedman_like(n: int = 2000, d: int = 10, noise: float = 0.5, seed: int = 0):
    """``y = 5 sin(pi x1 x2) + 2 (x3 - 0.5)^2 + x4 + N(0, noise^2)`` on U[0,1]^d."""
    if d < 4:
        raise ValueError("the benchmark needs d >= 4")
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = (5 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 2 * (X[:, 2] - 0.5) ** 2 + X[:, 3]
         + rng.normal(0.0, noise, n))
    return X, y


# toy world: two countries on a 0.1 degree lattice around (10N, 100E)
TOY_X_LL, TOY_Y_LL, TOY_CELL = 100.0, 10.0, 0.1
TOY_SHAPE = (20, 40)
TOY_CITIES = {
    "Alpha": ("AA", (100.2, 10.2, 101.8, 11.8)),
    "Beta": ("BB", (102.2, 10.2, 103.8, 11.8)),
}
TOY_START = dt.date(2020, 1, 6)


def _toy_field(rng, week_index, variable):
    rows, cols = TOY_SHAPE
    yy, xx = np.mgrid[0:rows, 0:cols]
    base = {"aod": 0.3, "no2": 2e-5, "precip": 0.5, "popden": 300.0}[variable]
    wave = np.sin(xx / 6.0 + week_index) * np.cos(yy / 5.0 - 0.3 * week_index)
    noise = rng.normal(0, 0.1, TOY_SHAPE)
    if variable == "popden":
        return np.round(base * (1.5 + wave + noise), 3)
    return np.round(base * (1.0 + 0.5 * wave + noise), 9)


def write_toy_project(directory, n_sites: int = 40, n_weeks: int = 6, seed: int = 0) -> dict:
    """Write a self-consistent toy input set; returns the written paths."""
    rng = np.random.default_rng(seed)
    os.makedirs(directory, exist_ok=True)
    mosaic_dir = os.path.join(directory, "mosaics")
    os.makedirs(mosaic_dir, exist_ok=True)
    weeks = [TOY_START + dt.timedelta(weeks=k) for k in range(n_weeks)]
    fields = {}
    for k, week in enumerate(weeks):
        for var in ("aod", "no2", "precip", "popden"):
            grid = _toy_field(rng, k, var)
            fields[(var, week)] = grid
            # split every variable into a west and an east tile to exercise the mosaic seam
            half = TOY_SHAPE[1] // 2
            names = []
            for j, sl in enumerate((slice(0, half), slice(half, None))):
                name = f"{var}_{week.isoformat()}_{j}.asc"
                write_grid(RasterGrid(grid[:, sl], TOY_X_LL + j * half * TOY_CELL, TOY_Y_LL, TOY_CELL),
                           os.path.join(mosaic_dir, name))
                names.append(name)
            write_mosaic_manifest(os.path.join(mosaic_dir, f"{var}_{week.isoformat()}.json"), var,
                                  week.isoformat(), names)

    features = []
    for city, (country, (x0, y0, x1, y1)) in sorted(TOY_CITIES.items()):
        features.append({"type": "Feature", "properties": {"city": city, "country": country},
                         "geometry": {"type": "Polygon", "coordinates": [[[x0, y0], [x1, y0], [x1, y1],
                                                                          [x0, y1], [x0, y0]]]}})
    cities_path = os.path.join(directory, "cities.geojson")
    with open(cities_path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh, indent=1)

    lines = ["site_id,latitude,longitude,city,country,timestamp_utc,parameter,value,unit"]
    city_names = sorted(TOY_CITIES)
    for i in range(n_sites):
        city = city_names[i % len(city_names)]
        country, (x0, y0, x1, y1) = TOY_CITIES[city]
        lat = round(float(rng.uniform(y0 + 0.05, y1 - 0.05)), 4)
        lon = round(float(rng.uniform(x0 + 0.05, x1 - 0.05)), 4)
        r = int(round((TOY_Y_LL + TOY_SHAPE[0] * TOY_CELL - lat) / TOY_CELL - 0.5))
        c = int(round((lon - TOY_X_LL) / TOY_CELL - 0.5))
        for week in weeks:
            aod = fields[("aod", week)][r, c]
            pop = fields[("popden", week)][r, c]
            level = 40 * aod + 0.02 * pop + (8 if country == "BB" else 0)
            for day in range(0, 7, 2):
                ts = dt.datetime.combine(week + dt.timedelta(days=day), dt.time(6 * (day % 3)))
                value = max(0.0, level + rng.normal(0, 2.0))
                lines.append(f"S{i:03d},{lat},{lon},{city},{country},{ts.isoformat()}Z,pm25,"
                             f"{value:.2f},ug/m3")
            lines.append(f"S{i:03d},{lat},{lon},{city},{country},{week.isoformat()}T12:00:00Z,no2,"
                         f"{rng.uniform(5, 40):.2f},ug/m3")
        # one out-of-range reading per site, removed by the validity filter
        lines.append(f"S{i:03d},{lat},{lon},{city},{country},{weeks[0].isoformat()}T01:00:00Z,pm25,"
                     f"{3500 + i},ug/m3")
    sensors_path = os.path.join(directory, "sensors.csv")
    with open(sensors_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    land = np.ones(TOY_SHAPE)
    land[:, -3:] = 0.0
    land_path = os.path.join(directory, "land_mask.asc")
    write_grid(RasterGrid(land, TOY_X_LL, TOY_Y_LL, TOY_CELL, -9999), land_path)
    child = np.round(rng.uniform(0, 500, TOY_SHAPE))
    child_path = os.path.join(directory, "child_pop.asc")
    write_grid(RasterGrid(child, TOY_X_LL, TOY_Y_LL, TOY_CELL, -9999), child_path)
    return {"sensors": sensors_path, "mosaics": mosaic_dir, "cities": cities_path,
            "land_mask": land_path, "child_pop": child_path, "weeks": [w.isoformat() for w in weeks]}


# 2x2 exposure hand case: child population and the predictions the step model returns, row-major
HAND_CHILD_POP = ((100.0, 200.0), (300.0, 400.0))
HAND_PM25 = ((5.0, 30.0), (9.0, 26.0))
HAND_WEEKS = ("2020-02-03", "2020-04-13")


def step_model(lat_split: float, lon_split: float, nw: float, ne: float, sw: float, se: float):
    """A stacked model whose prediction is a fixed value per quadrant around a split point."""
    from .features import FEATURE_NAMES
    from .model import BoostedModel, ForestModel, LinearModel, RegressionTree, StackedModel, TrainConfig
    from .model.ensemble import LEAF_WISE, LEVEL_WISE

    d = len(FEATURE_NAMES)
    lat, lon = FEATURE_NAMES.index("lat"), FEATURE_NAMES.index("lon")
    leaf = -1
    tree = RegressionTree(
        feature=np.array([lat, lon, lon, leaf, leaf, leaf, leaf]),
        threshold=np.array([lat_split, lon_split, lon_split, 0, 0, 0, 0], dtype=np.float64),
        left=np.array([1, 3, 5, -1, -1, -1, -1]),
        right=np.array([2, 4, 6, -1, -1, -1, -1]),
        value=np.array([0, 0, 0, sw, se, nw, ne], dtype=np.float64),
        gain=np.array([1.0, 1.0, 1.0, 0, 0, 0, 0]),
        n_samples=np.array([4, 2, 2, 1, 1, 1, 1]),
        n_features=d,
    )
    tree.validate()
    forest = ForestModel([tree], 1.0, [0], d)
    gbms = [BoostedModel(0.0, [], 0.1, g, d) for g in (LEVEL_WISE, LEAF_WISE)]
    return StackedModel(forest, gbms[0], gbms[1], LinearModel(np.array([1.0, 0.0, 0.0]), 0.0),
                        FEATURE_NAMES, TrainConfig())


def write_exposure_fixture(directory) -> dict:
    """Write the 2x2 hand case: population raster, constant mosaics for two weeks and a step model."""
    from .model import save_model

    os.makedirs(directory, exist_ok=True)
    mosaic_dir = os.path.join(directory, "mosaics")
    os.makedirs(mosaic_dir, exist_ok=True)
    x_ll, y_ll, cs = TOY_X_LL, TOY_Y_LL, TOY_CELL
    pop_path = os.path.join(directory, "child_pop_2x2.asc")
    write_grid(RasterGrid(np.array(HAND_CHILD_POP), x_ll, y_ll, cs), pop_path)
    constants = {"aod": 0.3, "no2": 1e-5, "precip": 0.5, "popden": 80.0}
    for week in HAND_WEEKS:
        for var, v in constants.items():
            name = f"{var}_{week}.asc"
            write_grid(RasterGrid(np.full((2, 2), v), x_ll, y_ll, cs), os.path.join(mosaic_dir, name))
            write_mosaic_manifest(os.path.join(mosaic_dir, f"{var}_{week}.json"), var, week, [name])
    (nw, ne), (sw, se) = HAND_PM25
    model = step_model(y_ll + cs, x_ll + cs, nw, ne, sw, se)
    model_path = os.path.join(directory, "model.json")
    save_model(model, model_path)
    return {"child_pop": pop_path, "mosaics": mosaic_dir, "model": model_path, "weeks": list(HAND_WEEKS)}
