"""
From sensor readings to a child-exposure map
============================================

A bundled toy world (two cities, six weeks of rasters, forty sensors) runs
through every stage: weekly resampling, feature extraction, a site-level
train/test split, the stacked model, and a gridded exposure layer written
as GeoJSON.
"""

import os
import tempfile

import numpy as np

from pmexposure.evaluate import evaluation_report
from pmexposure.exposure import child_exposure, compare_periods, export_geojson, grid_cells
from pmexposure.exposure import mosaics_for_week, predict_grid
from pmexposure.features import FEATURE_NAMES, build_feature_table, feature_matrix, stratified_split
from pmexposure.geodata import load_city_polygons, load_grid, load_mosaic_dir
from pmexposure.ingest import descriptive_stats, filter_valid, parse_measurements, weekly_resample
from pmexposure.model import BoostingParams, ForestParams, TrainConfig, fit_stacked
from pmexposure.synthetic import write_toy_project

work = tempfile.mkdtemp(prefix="pmexposure-")
paths = write_toy_project(os.path.join(work, "toy"))

# sensor readings -> valid readings -> weekly means per site
parsed = parse_measurements(paths["sensors"])
weekly = weekly_resample(filter_valid(parsed.measurements))
print(len(parsed.measurements), "readings,", len(weekly), "site-weeks")
print("weekly means", {k: round(v, 2) for k, v in descriptive_stats([r.pm25_avg for r in weekly]).items()})

# local buffers and city polygons for every site-week
mosaics = load_mosaic_dir(paths["mosaics"])
cities = load_city_polygons(paths["cities"])
table = build_feature_table(weekly, parsed.sites, mosaics, cities)
X, y = feature_matrix(table.rows)

# isolated sites are more likely to land in the test set
split = stratified_split(table.rows, train_frac=0.8, seed=1, radius_km=30)
cfg = TrainConfig(seed=1, forest=ForestParams(n_trees=60), boosting=BoostingParams(n_trees=60))
model = fit_stacked(X[split.train_idx], y[split.train_idx], cfg, FEATURE_NAMES)
te = split.test_idx
countries = [parsed.sites[table.rows[i].site_id].country for i in te]
report = evaluation_report(model.predict(X[te]), y[te], countries)
print("test", report["global"])
print("by country", {k: round(v["rmse"], 3) for k, v in report["by_country"].items()})

# predict every child-population cell for two weeks and compare them
pop = load_grid(paths["child_pop"])
centres, bounds = grid_cells(pop)
reports = []
for week in (paths["weeks"][0], paths["weeks"][-1]):
    g = predict_grid(model, mosaics_for_week(mosaics, week), centres, cities)
    reports.append(child_exposure(bounds, g.pm25, pop, week=week))
    print(week, reports[-1].totals)

delta = compare_periods(*reports)
print("mean change", round(delta["mean_delta"], 3), "| newly exceeding", delta["cells_newly_exceeding"],
      "| recovered", delta["cells_recovered"])

out = os.path.join(work, "exposure.geojson")
export_geojson(reports[-1], out)
print("wrote", out, os.path.getsize(out), "bytes")
print("highest cell", np.nanmax([c.pm25_pred for c in reports[-1].cells]).round(2))
