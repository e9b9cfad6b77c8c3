"""Batch command-line pipeline.

Subcommands: simulate, ingest, verify, fit, forecast, evaluate. Reports are
JSON or CSV; plotting is left to external tools. Exit codes are stable for
scripting: 0 success, 1 usage error, 2 insufficient data, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import eventlog as ev
from . import forecast as fc
from . import verify as vf
from .model import DEFAULT_HORIZONS, LotModel, calibrate_sigma_pred, fit_lot_model, run_backtest
from .queueing import HOUR, SimConfig, simulate_lot
from .seasonal import NonConvergence, DegenerateSeries

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INSUFFICIENT = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_log(path: str, min_stays: int) -> dict[str, ev.EventLog]:
    text = Path(path).read_text(encoding="utf-8")
    log = ev.parse_event_log(text)
    out = {}
    for loc, sub in ev.split_by_location(log).items():
        repaired, _ = ev.repair_log(sub)
        out[loc] = ev.filter_spots(repaired, min_stays=min_stays)
    return out


def _select_locations(logs: dict, wanted: str | None) -> dict:
    if not wanted:
        return logs
    names = [w.strip() for w in wanted.split(",") if w.strip()]
    missing = [n for n in names if n not in logs]
    if missing:
        raise UsageError(f"unknown locations: {', '.join(missing)}")
    return {n: logs[n] for n in names}


def _parse_duration(text: str) -> float:
    """Duration strings: plain seconds, or <number><s|m|h|d>."""
    units = {"s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}
    text = text.strip().lower()
    if text and text[-1] in units:
        return float(text[:-1]) * units[text[-1]]
    return float(text)


def cmd_simulate(args) -> int:
    cfg = SimConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    if args.seed is not None:
        cfg.seed = args.seed
    log = simulate_lot(cfg)
    _atomic_write(Path(args.out), ev.event_log_to_csv(log))
    if args.truth_out:
        _atomic_write(Path(args.truth_out), cfg.to_json())
    print(f"simulate: {len(log.events)} events -> {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    text = Path(args.events).read_text(encoding="utf-8")
    log = ev.parse_event_log(text, strict=args.strict)
    by_loc = ev.split_by_location(log)
    by_loc = _select_locations(by_loc, args.locations)
    all_stays = []
    report = {"locations": {}, "bad_rows": len(log.bad_rows)}
    for loc, sub in by_loc.items():
        repaired, rep = ev.repair_log(sub)
        kept = ev.filter_spots(repaired, min_stays=args.min_stays)
        stays = ev.stays_from_log(kept)
        all_stays.extend(stays)
        report["locations"][loc] = {
            "events": len(sub.events),
            "inserted_events": rep.inserted_events,
            "inserted_fraction": rep.inserted_fraction,
            "boundary_events": rep.boundary_events,
            "spots_kept": len(kept.spot_ids()),
            "stays": len(stays),
        }
    all_stays.sort(key=lambda s: (s.arrival_time, s.spot_id))
    _atomic_write(Path(args.out), ev.stays_to_csv(all_stays))
    if args.report:
        _atomic_write(Path(args.report), json.dumps(report, indent=2))
    print(f"ingest: {len(all_stays)} stays -> {args.out}")
    return EXIT_OK


def _battery_report(log: ev.EventLog, capacity: int, bins: int) -> dict:
    stays = ev.stays_from_log(log)
    arrivals = log.arrival_times()
    occ = vf.max_occupancy_check(log, capacity=capacity)
    report = {"capacity": capacity, "max_occupancy": occ}
    chi = vf.chi_square_independence(vf.service_pairs_by_window(stays), bins=bins)
    report["service_independence_chi2"] = _result_doc(chi)
    battery = vf.nhpp_test_battery(arrivals)
    for name, res in battery.items():
        report[f"ks_{name}"] = _result_doc(res)
    return report


def _result_doc(res: vf.TestResult) -> dict:
    doc = {
        "statistic": res.statistic,
        "n": res.n,
        "p_value": res.p_value,
        "windows_used": res.windows_used,
        "windows_skipped": res.windows_skipped,
    }
    if res.dof is not None:
        doc["dof"] = res.dof
    if res.window_p_values:
        doc["window_p_mean"] = res.window_p_mean
    return doc


def _points_csv(points: np.ndarray, header: tuple[str, str]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for x, y in points:
        writer.writerow([repr(float(x)), repr(float(y))])
    return out.getvalue()


def cmd_verify(args) -> int:
    logs = _select_locations(_read_log(args.events, args.min_stays), args.locations)
    if not logs:
        raise vf.InsufficientData("no locations in input")
    report = {}
    for loc, log in logs.items():
        capacity = len(log.spot_ids())
        if capacity == 0:
            raise vf.InsufficientData(f"location {loc}: no spots after filtering")
        report[loc] = _battery_report(log, capacity, args.bins)
        if args.plots:
            out_dir = Path(args.out_dir)
            norm = vf.normalized_interarrivals(log.arrival_times())
            data = vf.pp_qq_data(norm.values)
            _atomic_write(out_dir / f"{loc}_pp.csv", _points_csv(data["pp"], ("ref_prob", "emp_prob")))
            _atomic_write(out_dir / f"{loc}_qq.csv", _points_csv(data["qq"], ("ref_quantile", "emp_quantile")))
            hist = vf.conditional_interarrival_histogram(norm, lag_bins=4)
            out = io.StringIO()
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(["lag_bin", "value_bin_left", "value_bin_right", "density"])
            for i in range(hist.densities.shape[0]):
                for j in range(hist.densities.shape[1]):
                    writer.writerow([i, repr(float(hist.value_edges[j])), repr(float(hist.value_edges[j + 1])), repr(float(hist.densities[i, j]))])
            _atomic_write(out_dir / f"{loc}_conditional_hist.csv", out.getvalue())
    _atomic_write(Path(args.report), json.dumps(report, indent=2))
    print(f"verify: {len(report)} location(s) -> {args.report}")
    return EXIT_OK


def _load_stays(args) -> list[ev.StayRecord]:
    if args.stays:
        return ev.parse_stays_csv(Path(args.stays).read_text(encoding="utf-8"))
    logs = _select_locations(_read_log(args.events, args.min_stays), args.locations)
    stays = []
    for log in logs.values():
        stays.extend(ev.stays_from_log(log))
    stays.sort(key=lambda s: (s.arrival_time, s.spot_id))
    return stays


def cmd_fit(args) -> int:
    stays = _load_stays(args)
    if not stays:
        raise vf.InsufficientData("no stays to fit")
    arrivals = np.array([s.arrival_time for s in stays])
    origin = float(np.floor(arrivals.min() / HOUR) * HOUR)
    end = float(np.floor(arrivals.max() / HOUR) * HOUR + HOUR)
    calib_s = args.calibration_hours * HOUR
    train_end = end - calib_s if calib_s else end
    model = fit_lot_model(
        stays,
        location_id=args.location_id,
        utc_offset_hours=args.utc_offset,
        span=(origin, train_end),
    )
    if calib_s:
        max_h = max(DEFAULT_HORIZONS)
        calib_origins = np.arange(train_end, end - max_h + 1, HOUR)
        if calib_origins.size >= 30:
            calibrate_sigma_pred(stays, model, calib_origins)
    _atomic_write(Path(args.out), model.to_json())
    print(f"fit: model for {args.location_id} -> {args.out}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    from .seasonal import hourly_occupancy_series

    model = LotModel.from_json(Path(args.model).read_text(encoding="utf-8"))
    stays = _load_stays(args)
    t0 = float(args.at)
    if t0 % HOUR:
        raise UsageError("--at must be hour-aligned (hourly histories)")
    horizon = _parse_duration(args.horizon)
    state = fc.lot_state_at(stays, t0)
    doc = {"method": args.method, "at": t0, "horizon": horizon}
    if horizon == 0:
        doc.update({"mean": float(state.count), "var_lb": 0.0, "var_total": 0.0})
    elif args.method == "micro":
        dist = fc.micro_forecast(
            state,
            model.components,
            model.arrivals.shares_at,
            _rate_paths_for(model, stays, t0, horizon),
            horizon,
            model.sigma_micro,
        )
        doc.update(
            {
                "mean": dist.mean,
                "var_lb": dist.var_lb,
                "var_total": dist.var_total,
                "parts": {
                    "e_old": dist.parts.e_old,
                    "var_old": dist.parts.var_old,
                    "e_new": dist.parts.e_new,
                    "var_new": dist.parts.var_new,
                },
            }
        )
    elif args.method == "macro":
        origin = model.trained_span[0]
        n_hours = int(round((t0 - origin) / HOUR)) + 1
        occupancy = hourly_occupancy_series(stays, origin, n_hours, model.utc_offset_hours)
        dist = fc.macro_forecast(
            occupancy, model.occupancy_effects, model.occupancy_sarima, horizon, model.sigma_macro
        )
        doc.update({"mean": dist.mean, "var_lb": dist.var_lb, "var_total": dist.var_total})
    else:
        if model.mmc is None:
            raise vf.InsufficientData("model carries no relaxation fit")
        mean = fc.mmc_forecast(state.count, model.mmc, t0, horizon, model.utc_offset_hours)
        doc.update({"mean": mean, "var_lb": None, "var_total": None})
    _atomic_write(Path(args.out), json.dumps(doc, indent=2))
    print(f"forecast: {args.method} at {t0} +{args.horizon} -> {args.out}")
    return EXIT_OK


def _rate_paths_for(model: LotModel, stays, t0: float, horizon: float):
    from .seasonal import HourlySeries, forecast_arrival_rate, hourly_population_series

    origin = model.trained_span[0]
    k = int(round((t0 - origin) / HOUR))
    pops = hourly_population_series(
        stays, model.partition, model.utc_offset_hours, origin=origin, n_hours=max(k, 1)
    )
    hist = [HourlySeries(s.origin, s.values[:k], s.utc_offset_hours) for s in pops.series]
    return forecast_arrival_rate(model.arrivals, hist, int(np.ceil(horizon / HOUR)))


def cmd_evaluate(args) -> int:
    model = LotModel.from_json(Path(args.model).read_text(encoding="utf-8"))
    stays = _load_stays(args)
    horizons = [_parse_duration(h) for h in args.horizons.split(",")]
    start = float(args.start)
    end = float(args.end)
    if start % HOUR or (end - start) <= 0:
        raise UsageError("--start must be hour-aligned and before --end")
    origins = np.arange(start, end - max(horizons) + 1, args.every * HOUR)
    if origins.size == 0:
        raise vf.InsufficientData("no forecast origins fit in the window")
    methods = tuple(m.strip() for m in args.methods.split(","))
    records = run_backtest(stays, model, origins, horizons, methods=methods)
    report = fc.evaluate(records)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["method", "horizon_s", "n", "rmse", "sqrt_mean_var_lb", "coverage90", "coverage95"])
    for (method, horizon), row in sorted(report.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        writer.writerow(
            [
                method,
                repr(float(horizon)),
                row["n"],
                repr(row["rmse"]),
                repr(float(np.sqrt(row["mean_var_lb"]))),
                repr(row["coverage90"]),
                repr(row["coverage95"]),
            ]
        )
    _atomic_write(Path(args.out), out.getvalue())
    if args.errors_out:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["method", "horizon_s", "normalized_error"])
        for (method, horizon), row in sorted(report.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            for z in row["normalized_errors"]:
                writer.writerow([method, repr(float(horizon)), repr(float(z))])
        _atomic_write(Path(args.errors_out), out.getvalue())
    print(f"evaluate: {len(records)} forecasts -> {args.out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="lotforecast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic event log from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="parse, repair, filter, and emit stays")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--min-stays", type=int, default=2)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--locations")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("verify", help="run the assumption-check battery")
    p.add_argument("--events", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--min-stays", type=int, default=2)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--locations")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fit", help="fit the lot model and write model JSON")
    p.add_argument("--events")
    p.add_argument("--stays")
    p.add_argument("--out", required=True)
    p.add_argument("--location-id", default="lot")
    p.add_argument("--min-stays", type=int, default=2)
    p.add_argument("--utc-offset", type=int, default=0)
    p.add_argument("--calibration-hours", type=int, default=168)
    p.add_argument("--locations")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("forecast", help="one forecast from a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--events")
    p.add_argument("--stays")
    p.add_argument("--at", required=True, type=float)
    p.add_argument("--horizon", required=True)
    p.add_argument("--method", default="micro", choices=["micro", "macro", "mmc"])
    p.add_argument("--out", required=True)
    p.add_argument("--min-stays", type=int, default=2)
    p.add_argument("--locations")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="backtest methods over a window")
    p.add_argument("--model", required=True)
    p.add_argument("--events")
    p.add_argument("--stays")
    p.add_argument("--start", required=True, type=float)
    p.add_argument("--end", required=True, type=float)
    p.add_argument("--every", type=float, default=1.0, help="origin spacing in hours")
    p.add_argument("--horizons", default="300,3600,21600,86400")
    p.add_argument("--methods", default="micro,macro")
    p.add_argument("--out", required=True)
    p.add_argument("--errors-out")
    p.add_argument("--min-stays", type=int, default=2)
    p.add_argument("--locations")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (vf.InsufficientData, fc.InsufficientBacktest) as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except (NonConvergence, DegenerateSeries, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ev.MissingHeader, ev.BadTimestamp, ev.BadKind, ev.UnrepairedLog, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
