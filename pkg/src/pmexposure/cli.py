"""Command-line pipeline: ingest, extract, train, predict, evaluate, sample-points, exposure, export-geojson.

Options may also come from a JSON file given with ``--config``; flags on the
command line win over file values.  Errors are reported as a single JSON
line on stderr and the exit code is 0 on success, 1 on a runtime failure and
2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import math
import os
import sys
from types import SimpleNamespace

import numpy as np

from . import __version__
from .evaluate import DEFAULT_BREAKPOINTS, evaluation_report, load_breakpoints, regression_metrics
from .exposure import (
    WhoThresholds, cells_around, child_exposure, compare_periods, export_geojson, grid_cells,
    mosaics_for_week, predict_grid, report_from_dict, sample_land_points,
)
from .features import (
    FEATURE_NAMES, build_feature_table, feature_matrix, read_feature_csv, split_train_test,
    stratified_split, write_feature_csv,
)
from .geodata import load_city_polygons, load_grid, load_mosaic_dir
from .ingest import (
    descriptive_stats, fetch_measurements, filter_valid, parse_measurements, read_sites_csv,
    read_weekly_csv, weekly_resample, write_sites_csv, write_weekly_csv,
)
from .model import TrainConfig, base_importances, config_hash, fit_stacked, load_model, save_model
from .model.stacking import BASE_NAMES

log = logging.getLogger("pmexposure")

# built-in defaults; a config file overrides these and flags override both
DEFAULTS = {
    "seed": 0, "threads": 1, "radius_m": 75.0, "radius_km": 50.0, "stratified": False, "group": None,
    "within_mask_extent": False, "train_frac": None, "n_folds": None, "on_missing_city": "error",
    "n": 1000, "cell_size": 0.1, "page_size": 100, "date_from": None, "date_to": None, "week": None,
    "compare": None,
}
# inputs that must exist before a command runs
INPUT_KEYS = ("input", "sites", "mosaics", "cities", "model", "child_pop", "points", "breakpoints")
OUTPUT_KEYS = ("out", "report", "geojson", "sites_out")
# neither paths nor parallelism enter the configuration hash
UNHASHED = {"command", "config", "threads", *INPUT_KEYS, *OUTPUT_KEYS}


class UsageError(Exception):
    pass


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pmexposure", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pmexposure {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        _add(p, "--config", help="JSON file with option values (flags win)")
        _add(p, "--seed", type=int, help="random seed (default 0)")
        _add(p, "--threads", type=int, help="worker threads; never changes output bytes (default 1)")
        _add(p, "--out", help="output path")
        return p

    p = command("ingest", "raw sensor CSV or HTTP endpoint -> weekly records")
    _add(p, "--input", help="sensor CSV path or http(s) base URL")
    _add(p, "--sites-out", help="site table path (default: <out stem>_sites.csv)")
    _add(p, "--date-from", help="first day for HTTP ingest (YYYY-MM-DD)")
    _add(p, "--date-to", help="last day for HTTP ingest (YYYY-MM-DD)")
    _add(p, "--page-size", type=int, help="HTTP page size (default 100)")

    p = command("extract", "weekly records + rasters -> feature table")
    _add(p, "--input", help="weekly records CSV")
    _add(p, "--sites", help="site table CSV")
    _add(p, "--mosaics", help="directory of mosaic manifests")
    _add(p, "--cities", help="city polygons GeoJSON")
    _add(p, "--radius-m", type=float, help="buffer radius in metres (default 75)")
    _add(p, "--on-missing-city", choices=("error", "drop"), help="sites whose city has no polygon")

    p = command("train", "feature table -> stacked model + evaluation report")
    _add(p, "--input", help="feature table CSV")
    _add(p, "--report", help="evaluation report path (default: <out stem>.report.json)")
    _add(p, "--sites", help="site table CSV, needed for --group")
    _add(p, "--group", choices=("country", "city"), help="also report metrics per group")
    _add(p, "--stratified", action="store_true", help="density-weighted site split")
    _add(p, "--radius-km", type=float, help="station density radius for --stratified (default 50)")
    _add(p, "--train-frac", type=float, help="fraction of sites used for training (default 0.8)")
    _add(p, "--n-folds", type=int, help="stacking folds (default 5)")
    _add(p, "--breakpoints", help="AQI breakpoint override JSON")

    p = command("predict", "model + week's mosaics + points -> predictions CSV")
    _add(p, "--model", help="model JSON")
    _add(p, "--mosaics", help="directory of mosaic manifests")
    _add(p, "--week", help="week key (Monday, YYYY-MM-DD)")
    _add(p, "--points", help="CSV with lat,lon columns")
    _add(p, "--cities", help="city polygons GeoJSON")
    _add(p, "--radius-m", type=float, help="buffer radius in metres (default 75)")

    p = command("evaluate", "model + feature table -> evaluation report")
    _add(p, "--model", help="model JSON")
    _add(p, "--input", help="feature table CSV")
    _add(p, "--sites", help="site table CSV, needed for --group")
    _add(p, "--group", choices=("country", "city"), help="also report metrics per group")
    _add(p, "--breakpoints", help="AQI breakpoint override JSON")

    p = command("sample-points", "land mask -> random land points CSV")
    _add(p, "--input", help="land mask ASCII grid (1 = land)")
    _add(p, "--n", type=int, help="number of points (default 1000)")
    _add(p, "--within-mask-extent", action="store_true",
         help="draw inside the mask's bounding box rather than the whole globe")

    p = command("exposure", "model + mosaics + child population -> exposure report and GeoJSON")
    _add(p, "--model", help="model JSON")
    _add(p, "--mosaics", help="directory of mosaic manifests")
    _add(p, "--child-pop", help="child population ASCII grid")
    _add(p, "--week", help="week key (Monday, YYYY-MM-DD)")
    _add(p, "--compare", nargs=2, metavar=("WEEK_A", "WEEK_B"), help="report the change between two weeks")
    _add(p, "--points", help="CSV of lat,lon cell centres (default: population raster cells)")
    _add(p, "--cell-size", type=float, help="cell side in degrees around --points (default 0.1)")
    _add(p, "--cities", help="city polygons GeoJSON")
    _add(p, "--radius-m", type=float, help="buffer radius in metres (default 75)")
    _add(p, "--geojson", help="GeoJSON layer path (default: <out stem>.geojson)")

    p = command("export-geojson", "exposure report JSON -> GeoJSON")
    _add(p, "--input", help="exposure report JSON")
    return parser


def _known_keys(parser) -> set[str]:
    keys = {"train", "thresholds"}
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            keys |= {a.dest for a in sp._actions if a.dest != "help"}
    return keys


def resolve(parser, args) -> SimpleNamespace:
    """Merge built-in defaults, the config file and explicit flags (in that order)."""
    opts = {k: v for k, v in DEFAULTS.items()}
    file_cfg = {}
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - _known_keys(parser)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    own = {k for k in vars(args)}
    opts.update({k: v for k, v in file_cfg.items() if k in own or k in ("train", "thresholds")})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    for k in own:
        opts.setdefault(k, None)
    s = SimpleNamespace(**opts)

    try:
        train = TrainConfig.from_dict(dict(opts.get("train") or {}))
        if s.train_frac is not None:
            train = train.replace(train_frac=float(s.train_frac))
        if s.n_folds is not None:
            train = train.replace(n_folds=int(s.n_folds))
        s.train_config = train.replace(seed=int(s.seed))
        s.thresholds = WhoThresholds(**(opts.get("thresholds") or {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    if s.threads < 1:
        raise UsageError("--threads must be >= 1")
    for key in INPUT_KEYS:
        path = getattr(s, key, None)
        if path is None or (key == "input" and str(path).startswith(("http://", "https://"))):
            continue
        if not os.path.exists(path):
            raise UsageError(f"input not found: --{key.replace('_', '-')} {path}")
    return s


def _require(s, *keys):
    for k in keys:
        if getattr(s, k, None) is None:
            raise UsageError(f"{s.command} requires --{k.replace('_', '-')}")


def run_metadata(s) -> dict:
    cfg = {k: v for k, v in sorted(vars(s).items())
           if k not in UNHASHED and k not in ("train_config", "thresholds", "train")}
    cfg["train"] = s.train_config.to_dict()
    cfg["thresholds"] = s.thresholds.to_dict()
    cfg["command"] = s.command
    return {"seed": s.seed, "config_hash": config_hash(cfg), "tool_version": __version__}


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=1, allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _sidecar(path, meta: dict, **extra) -> None:
    """CSV outputs carry their run metadata in ``<path>.meta.json``."""
    _write_json(f"{path}.meta.json", {**meta, **extra})


def _stem(path) -> str:
    root, _ = os.path.splitext(path)
    return root


def _read_points(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"lat", "lon"} <= set(reader.fieldnames):
            raise CliError(f"{path}: points CSV needs lat and lon columns")
        rows = [(float(r["lat"]), float(r["lon"])) for r in reader]
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


# ---- commands ------------------------------------------------------------------

def cmd_ingest(s) -> int:
    _require(s, "input", "out")
    meta = run_metadata(s)
    if s.input.startswith(("http://", "https://")):
        _require(s, "date_from", "date_to")
        try:
            d0, d1 = dt.date.fromisoformat(s.date_from), dt.date.fromisoformat(s.date_to)
        except ValueError as exc:
            raise UsageError(f"bad date: {exc}") from None
        sites: dict = {}
        ms = fetch_measurements(s.input, d0, d1, s.page_size, sites=sites)
        skipped = 0
    else:
        parsed = parse_measurements(s.input)
        ms, sites, skipped = parsed.measurements, parsed.sites, parsed.skipped
    valid = filter_valid(ms)
    dropped = len(ms) - len(valid)
    if dropped:
        log.warning("%d PM2.5 readings outside [0, 3000] removed", dropped)
    records = weekly_resample(valid)
    write_weekly_csv(records, s.out)
    sites_out = s.sites_out or f"{_stem(s.out)}_sites.csv"
    write_sites_csv(sites, sites_out)
    stats = descriptive_stats([r.pm25_avg for r in records]) if records else None
    counts = {"measurements": len(ms), "out_of_range": dropped, "other_parameters": skipped,
              "weekly_records": len(records), "sites": len(sites)}
    _sidecar(s.out, meta, counts=counts, weekly_stats=stats)
    _sidecar(sites_out, meta)
    print(json.dumps({"weekly_records": len(records), "out_of_range": dropped, "stats": stats}))
    return 0


def cmd_extract(s) -> int:
    _require(s, "input", "sites", "mosaics", "cities", "out")
    meta = run_metadata(s)
    table = build_feature_table(read_weekly_csv(s.input), read_sites_csv(s.sites), load_mosaic_dir(s.mosaics),
                                load_city_polygons(s.cities), s.radius_m, s.on_missing_city, s.threads)
    write_feature_csv(table.rows, s.out)
    dropped = dict(sorted(table.dropped.items()))
    if dropped:
        log.warning("dropped records: %s", dropped)
    _sidecar(s.out, meta, rows=len(table.rows), dropped=dropped, radius_m=s.radius_m)
    return 0


def _groups(s, rows):
    if s.group is None:
        return None
    if s.sites is None:
        raise UsageError(f"--group {s.group} needs --sites")
    sites = read_sites_csv(s.sites)
    missing = sorted({r.site_id for r in rows} - set(sites))
    if missing:
        raise CliError(f"sites missing from {s.sites}: {', '.join(missing[:5])}")
    return [getattr(sites[r.site_id], s.group) for r in rows]


def _breakpoints(s):
    return load_breakpoints(s.breakpoints) if s.breakpoints else DEFAULT_BREAKPOINTS


def cmd_train(s) -> int:
    _require(s, "input", "out")
    meta = run_metadata(s)
    cfg = s.train_config
    rows = read_feature_csv(s.input)
    rows = [r for r in rows if r.y is not None]
    if len(rows) < 2:
        raise CliError(f"feature table too small: {len(rows)} labelled rows")
    if s.stratified:
        split = stratified_split(rows, cfg.train_frac, cfg.seed, s.radius_km)
    else:
        split = split_train_test(rows, cfg.train_frac, cfg.seed)
    tr, te = split.train_idx, split.test_idx
    if len(te) == 0:
        raise CliError(f"feature table too small: {len(split.train_sites)} sites leave no test site")
    X, y = feature_matrix(rows, FEATURE_NAMES)
    if len(tr) < 2 * cfg.n_folds or len(tr) < cfg.n_folds * cfg.min_samples_leaf:
        raise CliError(f"feature table too small: {len(tr)} training rows for {cfg.n_folds} folds "
                       f"with min_samples_leaf={cfg.min_samples_leaf}")
    model = fit_stacked(X[tr], y[tr], cfg, FEATURE_NAMES, threads=s.threads)
    save_model(model, s.out, metadata=meta)

    test_rows = [rows[i] for i in te]
    pred = model.predict(X[te])
    groups = _groups(s, test_rows)
    base_pred = model.base_predictions(X[te])
    extra = {
        "split": {"strategy": "stratified" if s.stratified else "simple",
                  "radius_km": s.radius_km if s.stratified else None,
                  "train_sites": len(split.train_sites), "test_sites": len(split.test_sites),
                  "train_rows": int(len(tr)), "test_rows": int(len(te))},
        "base_models": {name: regression_metrics(base_pred[:, j], y[te]).to_dict()
                        for j, name in enumerate(BASE_NAMES)},
        "meta_model": {"weights": dict(zip(BASE_NAMES, model.meta.weights.tolist())),
                       "intercept": model.meta.intercept},
        "feature_importance": base_importances(model),
        "metadata": meta,
    }
    report = evaluation_report(pred, y[te], groups, s.group or "country", _breakpoints(s), extra)
    _write_json(s.report or f"{_stem(s.out)}.report.json", report)
    g = report["global"]
    log.info("test rmse %.4f r2 %s on %d rows", g["rmse"], g["r2"], g["n"])
    return 0


def cmd_evaluate(s) -> int:
    _require(s, "model", "input", "out")
    meta = run_metadata(s)
    model = load_model(s.model)
    rows = [r for r in read_feature_csv(s.input) if r.y is not None]
    if not rows:
        raise CliError(f"{s.input}: no labelled rows to evaluate")
    X, y = feature_matrix(rows, model.feature_order)
    report = evaluation_report(model.predict(X), y, _groups(s, rows), s.group or "country", _breakpoints(s),
                               {"metadata": meta})
    _write_json(s.out, report)
    return 0


def cmd_predict(s) -> int:
    _require(s, "model", "mosaics", "week", "points", "out")
    meta = run_metadata(s)
    model = load_model(s.model)
    mosaics = mosaics_for_week(load_mosaic_dir(s.mosaics), s.week)
    pts = _read_points(s.points)
    cities = load_city_polygons(s.cities) if s.cities else None
    g = predict_grid(model, mosaics, pts, cities, s.radius_m, s.threads)
    with open(s.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", "week", "pm25"])
        for (lat, lon), v in zip(pts, g.pm25):
            w.writerow([repr(float(lat)), repr(float(lon)), s.week, _fmt(v)])
    _sidecar(s.out, meta, points=len(pts), nodata=g.n_nodata, nodata_reasons=dict(sorted(g.reasons.items())))
    return 0


def cmd_sample_points(s) -> int:
    _require(s, "input", "out")
    meta = run_metadata(s)
    if s.n < 1:
        raise UsageError("--n must be >= 1")
    pts = sample_land_points(s.n, load_grid(s.input), s.seed, within_mask_extent=s.within_mask_extent)
    with open(s.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon"])
        w.writerows([repr(float(a)), repr(float(b))] for a, b in pts)
    _sidecar(s.out, meta, points=len(pts))
    return 0


def cmd_exposure(s) -> int:
    _require(s, "model", "mosaics", "child_pop", "out")
    if (s.week is None) == (s.compare is None):
        raise UsageError("exposure needs exactly one of --week or --compare")
    meta = run_metadata(s)
    model = load_model(s.model)
    all_mosaics = load_mosaic_dir(s.mosaics)
    pop = load_grid(s.child_pop)
    if s.points:
        centres = _read_points(s.points)
        bounds = cells_around(centres, s.cell_size)
    else:
        centres, bounds = grid_cells(pop)
    cities = load_city_polygons(s.cities) if s.cities else None
    geojson = s.geojson or f"{_stem(s.out)}.geojson"

    def report_for(week):
        g = predict_grid(model, mosaics_for_week(all_mosaics, week), centres, cities, s.radius_m, s.threads)
        return child_exposure(bounds, g.pm25, pop, s.thresholds, week,
                              metadata={**meta, "nodata": g.n_nodata,
                                        "nodata_reasons": dict(sorted(g.reasons.items()))})

    if s.compare is None:
        report = report_for(s.week)
        _write_json(s.out, report.to_dict())
        export_geojson(report, geojson)
        t = report.totals
        log.info("week %s: %d cells exceed, %.0f children exposed", s.week, t["cells_exceeding"],
                 t["children_exposed"])
    else:
        a, b = (report_for(w) for w in s.compare)
        doc = {"comparison": compare_periods(a, b), "totals": {a.period: a.totals, b.period: b.totals},
               "metadata": meta}
        _write_json(s.out, doc)
        root, ext = os.path.splitext(geojson)
        for rep in (a, b):
            export_geojson(rep, f"{root}_{rep.period}{ext or '.geojson'}")
    return 0


def cmd_export_geojson(s) -> int:
    _require(s, "input", "out")
    with open(s.input, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{s.input}: not valid JSON ({exc})") from None
    export_geojson(report_from_dict(doc), s.out)
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "extract": cmd_extract, "train": cmd_train, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "sample-points": cmd_sample_points, "exposure": cmd_exposure,
    "export-geojson": cmd_export_geojson,
}


def _fail(kind: str, code: int, command, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "command": command, "message": message}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        s = resolve(parser, args)
        return COMMANDS[command](s)
    except UsageError as exc:
        return _fail("usage", 2, command, str(exc))
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        return _fail("runtime", 1, command, msg)


if __name__ == "__main__":
    sys.exit(main())
