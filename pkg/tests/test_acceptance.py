"""Acceptance gate: the twelve criteria at their stated tolerances.

Each test records one PASS/FAIL line, shown in the terminal summary.
"""
import datetime as dt
import json
import math
import time

import numpy as np
import pytest

from pmexposure import cli
from pmexposure.evaluate import AqiCategory, aqi_classify, classification_f1, regression_metrics
from pmexposure.exposure import child_exposure, dumps_geojson, export_geojson, grid_cells, read_geojson
from pmexposure.exposure import sample_land_points
from pmexposure.geodata import GeoPoint, Polygon, RasterGrid, VirtualMosaic, extract_buffer_mean
from pmexposure.geodata import extract_polygon_mean
from pmexposure.ingest import Measurement, filter_valid, week_of, weekly_resample
from pmexposure.model import (
    LEAF_WISE, LEVEL_WISE, BoostingParams, ForestParams, TrainConfig, fit_forest, fit_gbm, fit_linear,
    fit_stacked, load_model, save_model,
)
from pmexposure.model import stacking
from pmexposure.synthetic import HAND_CHILD_POP, HAND_PM25, friedman_like, write_toy_project

from acceptance_log import check
from cases import random_grid, random_star, same, split4
from oracles import buffer_mean_oracle, polygon_mean_oracle

UTC = dt.timezone.utc


def rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def test_c01_zonal_oracle_equivalence():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    bad = []
    for i in range(100):
        g = random_grid(rng)
        m = VirtualMosaic.from_grid(g)
        lat, lon = rng.uniform(g.y_ll, g.y_max), rng.uniform(g.x_ll, g.x_max)
        radius = g.cell_size * 111320 * rng.uniform(0.05, 3.0)
        if not same(extract_buffer_mean(m, GeoPoint(lat, lon), radius),
                    buffer_mean_oracle(m.tiles, lat, lon, radius), 1e-9):
            bad.append(("buffer", i))
        ring = random_star(rng, g)
        if not same(extract_polygon_mean(m, Polygon(ring)), polygon_mean_oracle(m.tiles, ring), 1e-9):
            bad.append(("polygon", i))
    elapsed = time.perf_counter() - t0
    check(1, not bad and elapsed < 5.0, f"{len(bad)} mismatches in 200 extractions, {elapsed:.2f} s")


def test_c02_tile_invariance():
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(100):
        g = random_grid(rng)
        whole, tiled = VirtualMosaic.from_grid(g), split4(g, rng)
        p = GeoPoint(rng.uniform(g.y_ll, g.y_max), rng.uniform(g.x_ll, g.x_max))
        radius = g.cell_size * 111320 * rng.uniform(0.05, 3.0)
        poly = Polygon(random_star(rng, g))
        bad += not same(extract_buffer_mean(whole, p, radius), extract_buffer_mean(tiled, p, radius), 1e-12)
        bad += not same(extract_polygon_mean(whole, poly), extract_polygon_mean(tiled, poly), 1e-12)
    check(2, bad == 0, f"{bad} differences over 200 extractions")


def test_c03_temporal_pipeline():
    rng = np.random.default_rng(3)
    base = dt.datetime(2019, 12, 20, tzinfo=UTC)
    ms = [Measurement(f"S{int(rng.integers(0, 5))}", base + dt.timedelta(seconds=int(rng.integers(0, 60 * 86400))),
                      float(rng.uniform(0, 100))) for _ in range(2000)]
    records = weekly_resample(ms)
    ok_keys = True
    for r in records:
        members = [m for m in ms if m.site_id == r.site_id and week_of(m.timestamp) == r.week]
        # independent check: Monday key and a timestamp date within the following seven days
        ok_keys &= r.week.weekday() == 0 and len(members) == r.n_obs
        ok_keys &= all(r.week <= m.timestamp.date() <= r.week + dt.timedelta(days=6) for m in members)
    ok_keys &= sum(r.n_obs for r in records) == len(ms)
    edge = [Measurement("A", base, v) for v in (0.0, 3000.0, -1e-9, 3000.000001)]
    ok_filter = [m.pm25 for m in filter_valid(edge)] == [0.0, 3000.0]
    ok_sunday = week_of(dt.datetime(2020, 1, 5, 12, tzinfo=UTC)) == dt.date(2019, 12, 30)
    check(3, ok_keys and ok_filter and ok_sunday,
          f"keys {ok_keys}, inclusive bounds {ok_filter}, Sunday 2020-01-05 -> 2019-12-30 {ok_sunday}")


def test_c04_ensemble_correctness(monkeypatch):
    x = np.random.default_rng(4).permutation(300).astype(float)[:, None] / 11.0
    y = np.sin(x[:, 0]) * 5 + x[:, 0]
    deep = TrainConfig(boosting=BoostingParams(n_trees=5, learning_rate=1.0, max_depth=12, max_leaves=600),
                       min_samples_leaf=1)
    a = max(rmse(fit_gbm(x, y, deep, g).predict(x), y) for g in (LEVEL_WISE, LEAF_WISE))

    X, yy = friedman_like(600, 10, seed=4)
    traces = [np.array(fit_gbm(X, yy, TrainConfig(boosting=BoostingParams(n_trees=50)), g).loss_trace)
              for g in (LEVEL_WISE, LEAF_WISE)]
    b = all(len(t) == 51 and np.all(np.diff(t) <= 0) for t in traces)

    forest = fit_forest(X, yy, TrainConfig(forest=ForestParams(n_trees=40)))
    Xt = np.random.default_rng(5).random((200, 10))
    c = float(np.max(np.abs(forest.predict(Xt) - np.mean([t.predict(Xt) for t in forest.trees], axis=0))))

    n = 150
    Xs, ys = friedman_like(n, 5, seed=6)
    Xs = np.column_stack([Xs, np.arange(n)])
    seen = []
    real = stacking._fit_bases

    def spy(X_train, y_train, config, threads):
        seen.append(set(X_train[:, -1].astype(int)))
        return real(X_train, y_train, config, threads)

    monkeypatch.setattr(stacking, "_fit_bases", spy)
    small = TrainConfig(forest=ForestParams(n_trees=10), boosting=BoostingParams(n_trees=10))
    model = fit_stacked(Xs, ys, small)
    d = len(seen) == small.n_folds + 1 and all(s.isdisjoint(f.tolist()) for s, f in zip(seen, model.folds))
    check(4, a < 1e-6 and b and c <= 1e-12 and d,
          f"(a) rmse {a:.2e}, (b) non-increasing {b}, (c) max diff {c:.1e}, (d) folds clean {d}")


def test_c05_stacking_benchmark():
    X, y = friedman_like(2000, 10, noise=0.5, seed=0)
    perm = np.random.default_rng(0).permutation(2000)
    tr, te = perm[:1600], perm[1600:]
    t0 = time.perf_counter()
    model = fit_stacked(X[tr], y[tr], TrainConfig(seed=0), threads=1)
    pred = model.predict(X[te])
    elapsed = time.perf_counter() - t0
    base = [rmse(model.base_predictions(X[te])[:, j], y[te]) for j in range(3)]
    m = regression_metrics(pred, y[te])
    ok = m.rmse <= 1.05 * min(base) and m.r2 >= 0.80 and elapsed < 60
    check(5, ok, f"stacked rmse {m.rmse:.4f} vs bases {', '.join(f'{b:.4f}' for b in base)}; "
                 f"r2 {m.r2:.4f}; {elapsed:.1f} s")


def test_c06_linear_meta_model():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(200, 3))
    w, b = np.array([0.5, -2.0, 3.25]), 1.5
    m = fit_linear(X, X @ w + b)
    err = max(float(np.max(np.abs(m.weights - w))), abs(m.intercept - b))
    col = np.column_stack([X[:, 0], X[:, 0], X[:, 1]])
    mc = fit_linear(col, 2 * X[:, 0] - X[:, 1] + 4)
    col_err = float(np.max(np.abs(mc.predict(col) - (2 * X[:, 0] - X[:, 1] + 4))))
    check(6, err <= 1e-6 and np.isfinite(mc.weights).all() and col_err <= 1e-6,
          f"coefficient error {err:.1e}, collinear fit residual {col_err:.1e}")


def test_c07_metric_hand_cases():
    m = regression_metrics([0, 0], [3, 4])
    t = np.array([1.0, 3.0, 8.0])
    r2_one = regression_metrics(t, t).r2
    r2_zero = regression_metrics(np.full(3, t.mean()), t).r2
    G, M = AqiCategory.Good, AqiCategory.Moderate
    f1 = classification_f1([G, G, M], [G, M, M])["macro_f1"]
    ok = (abs(m.rmse - math.sqrt(12.5)) <= 1e-9 and abs(m.median_ae - 3.5) <= 1e-9 and abs(r2_one - 1) <= 1e-9
          and abs(r2_zero) <= 1e-9 and abs(f1 - 2 / 3) <= 1e-9)
    check(7, ok, f"rmse {m.rmse:.10f}, median_ae {m.median_ae}, r2 {r2_one}/{r2_zero}, macro F1 {f1:.10f}")


def test_c08_aqi():
    lookups = (aqi_classify(12.0), aqi_classify(12.01), aqi_classify(55.5))
    expect = (AqiCategory.Good, AqiCategory.Moderate, AqiCategory.Unhealthy)
    cats = [aqi_classify(v) for v in np.random.default_rng(8).uniform(0, 400, 500)]
    f1 = classification_f1(cats, cats)["macro_f1"]
    check(8, lookups == expect and f1 == 1.0, f"lookups {[c.name for c in lookups]}, self macro F1 {f1}")


def test_c09_land_sampling():
    world = RasterGrid(np.ones((18, 36)), -180.0, -90.0, 10.0)
    pts = sample_land_points(100_000, world, seed=9)
    frac = float(np.mean(np.abs(pts[:, 0]) < 30))
    vals = np.zeros((18, 36))
    vals[3:15, 5:30] = np.random.default_rng(9).random((12, 25)) < 0.5
    mask = RasterGrid(vals, -180.0, -90.0, 10.0)
    part = sample_land_points(5000, mask, seed=10)
    on_land = bool(np.all(mask.lookup(part[:, 0], part[:, 1]) == 1) and np.all(world.lookup(*pts.T) == 1))
    det = np.array_equal(part, sample_land_points(5000, mask, seed=10))
    check(9, abs(frac - 0.5) <= 0.02 and on_land and det,
          f"|lat|<30 fraction {frac:.4f}, all on land {on_land}, deterministic {det}")


def test_c10_exposure_hand_case(tmp_path):
    pop = RasterGrid(np.array(HAND_CHILD_POP), 100.0, 10.0, 0.1)
    _, bounds = grid_cells(pop)
    rep = child_exposure(bounds, np.ravel(HAND_PM25), pop, week="2020-02-03")
    export_geojson(rep, tmp_path / "a.geojson")
    export_geojson(read_geojson(tmp_path / "a.geojson"), tmp_path / "b.geojson")
    same_bytes = (tmp_path / "a.geojson").read_bytes() == (tmp_path / "b.geojson").read_bytes()
    t = rep.totals
    n_features = len(json.loads(dumps_geojson(rep))["features"])
    check(10, t["children_exposed"] == 600 and t["cells_exceeding"] == 2 and same_bytes and n_features == 4,
          f"children {t['children_exposed']:.0f}, cells {t['cells_exceeding']}, byte-identical {same_bytes}")


def test_c11_cli_determinism(tmp_path):
    paths = write_toy_project(tmp_path / "in")
    run = lambda *a: cli.main([str(x) for x in a])
    assert run("ingest", "--input", paths["sensors"], "--out", tmp_path / "weekly.csv") == 0
    assert run("extract", "--input", tmp_path / "weekly.csv", "--sites", tmp_path / "weekly_sites.csv",
               "--mosaics", paths["mosaics"], "--cities", paths["cities"], "--out", tmp_path / "features.csv") == 0
    outputs = {}
    for tag, threads in (("run1", 1), ("run2", 1), ("threads8", 8)):
        d = tmp_path / tag
        d.mkdir()
        codes = [
            run("train", "--input", tmp_path / "features.csv", "--seed", 42, "--threads", threads,
                "--group", "country", "--sites", tmp_path / "weekly_sites.csv", "--out", d / "model.json"),
            run("exposure", "--model", d / "model.json", "--mosaics", paths["mosaics"], "--child-pop",
                paths["child_pop"], "--cities", paths["cities"], "--week", paths["weeks"][1], "--seed", 42,
                "--threads", threads, "--out", d / "exposure.json"),
        ]
        assert codes == [0, 0]
        outputs[tag] = {f.name: f.read_bytes() for f in sorted(d.iterdir())}
    files = sorted(outputs["run1"])
    identical = outputs["run1"] == outputs["run2"] == outputs["threads8"]
    check(11, identical and len(files) == 4, f"{len(files)} artifacts ({', '.join(files)}) identical {identical}")


def test_c12_persistence(tmp_path):
    X, y = friedman_like(300, 10, seed=12)
    cfg = TrainConfig(forest=ForestParams(n_trees=30), boosting=BoostingParams(n_trees=30))
    model = fit_stacked(X, y, cfg)
    save_model(model, tmp_path / "m.json")
    Xt = np.random.default_rng(12).random((100, 10))
    ok = np.array_equal(model.predict(Xt), load_model(tmp_path / "m.json").predict(Xt))
    check(12, ok, "100 rows identical after save -> load")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
