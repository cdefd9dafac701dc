"""Command-line front end.

Subcommands: ``train-forecaster``, ``profile-capacity``, ``simulate``,
``sweep`` and ``report``. Every command writes into a run directory and
finishes with a ``manifest.json`` listing what it produced. Exit codes:
0 on success, 1 for configuration errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import config as C
from . import forecast as fc
from .loadpred import ErrorProfile, NoiseParams, calibrate_noise, make_predictor
from .metrics import build_report, forecast_accuracy, per_request
from .router import make_router
from .scaler import FORECAST_SCALERS, make_scaler
from .simcore import Policies, Simulator
from .trace import (
    TraceError,
    aggregate_windows,
    generate_periodic,
    generate_poisson,
    load_trace,
)

logger = logging.getLogger("lmaas_sim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# Files whose content depends on wall-clock time; everything else is reproducible.
NONDETERMINISTIC = {"timing.json"}


# ---------------------------------------------------------------------------
# Building blocks


def build_trace(cfg: Dict[str, Any]):
    t = cfg["trace"]
    if t["source"] == "file":
        return load_trace(t["path"], t["format"])
    lengths = C.lengths(cfg)
    if t["source"] == "poisson":
        return generate_poisson(t["qps"], t["duration"], lengths, seed=t["seed"])
    from .scenarios import DAY_PROFILE

    profile = t["day_profile"] or DAY_PROFILE
    return generate_periodic(profile, t["base_tps"], t["days"], t["peak_jitter"], t["seed"],
                             noise=t["noise"], day_length=t["day_length"], window=t["window"],
                             length_source=lengths, spikes=[tuple(s) for s in t["spikes"]])


def noise_params(cfg: Dict[str, Any]) -> NoiseParams:
    lp = cfg["loadpred"]
    if lp["zero_mass"] is not None:
        return NoiseParams(float(lp["zero_mass"]), float(lp["scale"]))
    _, d = C.lengths(cfg)(np.random.default_rng(0), 100_000)
    return calibrate_noise(ErrorProfile(**lp["profile"]), d, max_tokens=lp["max_tokens"])


def build_policies(cfg: Dict[str, Any]) -> Policies:
    lp = cfg["loadpred"]
    params = noise_params(cfg) if lp["predictor"] == "noisy" else None
    pred = make_predictor(lp["predictor"], seed=lp["seed"], params=params, max_tokens=lp["max_tokens"])
    router = make_router(cfg["router"]["policy"], C.router_config(cfg))
    scaler = forecaster = None
    policy = cfg["scaler"]["policy"]
    if policy is not None:
        scaler = make_scaler(policy, C.scaler_config(cfg))
        if policy in FORECAST_SCALERS:
            f = cfg["forecast"]
            model = fc.ForecastModel.load(f["checkpoint"])
            cap_src = f["capacity"]
            cap = fc.CapacityProfile.from_dict(json.loads(Path(cap_src).read_text()) if isinstance(cap_src, str) else cap_src)
            w = cfg["sim"]["window_length"]
            history = aggregate_windows(load_trace(f["history"], f["history_format"]), w)
            forecaster = fc.WindowForecaster(model, cap, history, w, cfg["sim"]["min_instances"],
                                             cfg["sim"]["max_instances"], retrain_every=f["retrain_every"])
    return Policies(router=router, scaler=scaler, loadpred=pred, forecaster=forecaster)


def run_simulation(cfg: Dict[str, Any]):
    C.validate(cfg)
    trace = build_trace(cfg)
    policies = build_policies(cfg)
    sim = Simulator(trace, policies, C.cost_model(cfg), C.sim_config(cfg))
    result = sim.run()
    report = build_report(result, C.metrics_config(cfg), provenance(cfg))
    return result, report


def provenance(cfg: Dict[str, Any]) -> Dict[str, Any]:
    """Configuration embedded in reports; the output location does not affect results and is left out."""
    out = json.loads(json.dumps(cfg))
    out["output"].pop("run_dir", None)
    return out


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_artifacts(run_dir: Path, files: Dict[str, str], command: str) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(files):
        (run_dir / name).write_text(files[name])
        entry: Dict[str, Any] = {"file": name}
        if name not in NONDETERMINISTIC:
            entry.update(bytes=len(files[name].encode()), sha256=_sha(files[name]))
        else:
            entry["deterministic"] = False
        entries.append(entry)
    manifest = {"command": command, "artifacts": entries}
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def report_files(report, include_events: bool) -> Dict[str, str]:
    files = {
        "config.json": C.dumps(report.config) + "\n",  # run_dir is implied by the location
        "aggregates.json": report.aggregates_json() + "\n",
        "requests.csv": report.rows_csv(),
        "timeline.csv": report.timeline_csv(),
        "instances.csv": report.instance_timeline_csv(),
        "timing.json": json.dumps(report.timing, indent=2, sort_keys=True) + "\n",
    }
    if include_events:
        files["events.jsonl"] = report.events_jsonl()
    if report.invariant_violations:
        files["violations.txt"] = "\n".join(report.invariant_violations) + "\n"
    return files


# ---------------------------------------------------------------------------
# Commands


def _overrides(args) -> Dict[str, Any]:
    o = {
        "trace.qps": getattr(args, "qps", None),
        "trace.duration": getattr(args, "duration", None),
        "trace.seed": getattr(args, "seed", None),
        "loadpred.seed": getattr(args, "seed", None),
        "router.policy": getattr(args, "router", None),
        "scaler.policy": getattr(args, "scaler", None),
        "loadpred.predictor": getattr(args, "predictor", None),
        "sim.fixed_instances": getattr(args, "instances", None),
        "output.run_dir": getattr(args, "run_dir", None),
    }
    if getattr(args, "trace", None):
        o["trace.source"] = "file"
        o["trace.path"] = args.trace
        o["trace.format"] = args.trace_format
    if getattr(args, "event_log", False):
        o["output.event_log"] = True
    if getattr(args, "dump_anticipator", None) is not None:
        o["output.event_log"] = True
        o["output.dump_anticipator"] = args.dump_anticipator
    return o


def _config(args) -> Dict[str, Any]:
    data = C.load_file(args.config) if getattr(args, "config", None) else None
    cfg = C.resolve(data, _overrides(args))
    C.validate(cfg)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    result, report = run_simulation(cfg)
    run_dir = Path(cfg["output"]["run_dir"])
    write_artifacts(run_dir, report_files(report, cfg["output"]["event_log"]), "simulate")
    a = report.aggregates
    print(f"requests={a['requests']} completed={a['completed']} aborted={a['aborted']} "
          f"p99_normalized_latency={a['normalized_latency_p99']} slo_attainment={a['slo_attainment']} "
          f"instance_seconds={a['instance_seconds']:.1f}")
    print(f"report written to {run_dir}")
    if report.invariant_violations:
        logger.error("%d invariant violations, see violations.txt", len(report.invariant_violations))
        return EXIT_RUNTIME
    return EXIT_OK


def _sweep_cell(cfg: Dict[str, Any]) -> Dict[str, Any]:
    _, report = run_simulation(cfg)
    a = report.aggregates
    return {
        "policy": cfg["router"]["policy"],
        "qps": cfg["trace"]["qps"],
        "seed": cfg["trace"]["seed"],
        "mean_ttft": a["ttft_mean"],
        "p99_normalized_latency": a["normalized_latency_p99"],
        "slo_attainment": a["slo_attainment"],
        "slo_attainment_with_aborts": a["slo_attainment_with_aborts"],
        "aborted": a["aborted"],
        "instance_seconds": a["instance_seconds"],
    }


SWEEP_METRICS = ("mean_ttft", "p99_normalized_latency", "slo_attainment", "slo_attainment_with_aborts")


def summarize_sweep(rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    groups: Dict[tuple, List[Dict[str, Any]]] = {}
    for r in rows:
        groups.setdefault((r["policy"], r["qps"]), []).append(r)
    out = []
    for (policy, qps), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        rec: Dict[str, Any] = {"policy": policy, "qps": qps, "seeds": len(rs)}
        for m in SWEEP_METRICS:
            vals = [r[m] for r in rs if r[m] is not None]
            rec[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            rec[f"{m}_std"] = float(np.std(vals)) if vals else None
        out.append(rec)
    return out


def _csv(rows: List[Dict[str, Any]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_sweep(args) -> int:
    base = _config(args)
    policies = args.policies.split(",") if args.policies else [base["router"]["policy"]]
    qps_list = [float(q) for q in args.qps_list.split(",")] if args.qps_list else [base["trace"]["qps"]]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base["trace"]["seed"]]
    cells = []
    for p in policies:
        for q in qps_list:
            for s in seeds:
                cfg = C.resolve(base, {"router.policy": p, "trace.qps": q, "trace.seed": s, "loadpred.seed": s})
                cfg["output"]["event_log"] = False
                C.validate(cfg)
                cells.append(cfg)
    run_dir = Path(base["output"]["run_dir"])
    rows: List[Dict[str, Any]] = []
    failure: Optional[BaseException] = None
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                for row in pool.map(_sweep_cell, cells):
                    rows.append(row)
        else:
            for cfg in cells:
                rows.append(_sweep_cell(cfg))
    except Exception as exc:  # keep whatever finished
        failure = exc
        logger.error("sweep aborted after %d/%d cells: %s", len(rows), len(cells), exc)
    rows.sort(key=lambda r: (r["policy"], r["qps"], r["seed"]))
    files = {
        "sweep.csv": _csv(rows),
        "summary.csv": _csv(summarize_sweep(rows)),
        "config.json": C.dumps(base) + "\n",
    }
    write_artifacts(run_dir, files, "sweep")
    print(files["summary.csv"], end="")
    return EXIT_RUNTIME if failure else EXIT_OK


def cmd_train_forecaster(args) -> int:
    try:
        if args.trace:
            trace = load_trace(args.trace, args.trace_format)
        else:
            cfg = _config(args)
            trace = build_trace(cfg)
    except TraceError as exc:
        raise C.ConfigError(str(exc)) from exc
    windows = aggregate_windows(trace, args.window)
    split = int(len(windows) * args.train_fraction)
    train, test = windows[:split], windows[split:]
    model = fc.train_forecaster(train, args.k, args.hidden, args.lr, args.epochs, args.seed)
    report: Dict[str, Any] = {
        "windows": len(windows), "train_windows": len(train), "test_windows": len(test),
        "window_length": args.window, "k": args.k, "hidden": args.hidden, "epochs": args.epochs,
        "seed": args.seed, "final_loss": model.final_loss(),
    }
    if len(test) >= 2:
        pred = fc.rolling_forecast(model, train, test, horizon=2)
        act = np.array([[w.prompt_total, w.decode_total] for w in test], dtype=float)
        report["ape"] = {n: forecast_accuracy(pred[:, j], act[:, j]) for j, n in enumerate(("prompt", "decode"))}
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    model.save(run_dir / "model.npz")
    files = {"training_report.json": json.dumps(report, indent=2, sort_keys=True) + "\n"}
    write_artifacts(run_dir, files, "train-forecaster")
    if "ape" in report:
        print(f"held-out mean APE: prompt={report['ape']['prompt']['mean_ape']:.4f} "
              f"decode={report['ape']['decode']['mean_ape']:.4f}")
    print(f"checkpoint written to {run_dir / 'model.npz'}")
    return EXIT_OK


def cmd_profile_capacity(args) -> int:
    from .scenarios import ramp_trace

    cfg = _config(args)
    if not args.trace and not args.config:
        lo, hi, n = (float(x) for x in args.ramp.split(":"))
        trace = ramp_trace(np.linspace(lo, hi, int(n)), args.window, seed=cfg["trace"]["seed"])
    else:
        trace = build_trace(cfg)
    pol = build_policies(cfg)
    sim = Simulator(trace, Policies(pol.router, None, pol.loadpred, None), C.cost_model(cfg), C.sim_config(cfg))
    result = sim.run()
    slo = cfg["metrics"]["slo_normalized_latency"]
    cap = fc.profile_capacity([per_request(r, slo) for r in result.requests], args.window, slo)
    run_dir = Path(cfg["output"]["run_dir"])
    files = {"capacity.json": json.dumps(cap.as_dict(), indent=2, sort_keys=True) + "\n",
             "config.json": C.dumps(cfg) + "\n"}
    write_artifacts(run_dir, files, "profile-capacity")
    print(json.dumps(cap.as_dict(), sort_keys=True))
    return EXIT_OK


REPORT_FIELDS = ("requests", "completed", "aborted", "ttft_mean", "normalized_latency_p99",
                 "slo_attainment", "slo_attainment_with_aborts", "instance_seconds", "preemptions")


def cmd_report(args) -> int:
    rows = []
    for d in args.run_dirs:
        path = Path(d) / "aggregates.json"
        if not path.exists():
            raise C.ConfigError(f"{path} does not exist")
        agg = json.loads(path.read_text())["aggregates"]
        rows.append({"run": str(d), **{k: agg.get(k) for k in REPORT_FIELDS}})
    text = _csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_common(p, trace_flags: bool = True):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--run-dir", dest="run_dir", help="output directory")
    if trace_flags:
        p.add_argument("--trace", help="trace file (overrides the generator)")
        p.add_argument("--trace-format", dest="trace_format", default="csv", choices=("csv", "azure"))
        p.add_argument("--qps", type=float)
        p.add_argument("--duration", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--router")
        p.add_argument("--predictor", choices=("oracle", "noisy", "heuristic"))
        p.add_argument("--instances", type=int, help="fixed instance count")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lmaas-sim", description="LMaaS cluster simulator")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one simulation")
    _add_common(p)
    p.add_argument("--scaler")
    p.add_argument("--event-log", dest="event_log", action="store_true")
    p.add_argument("--dump-anticipator", dest="dump_anticipator", type=float, metavar="SECONDS",
                   help="write look-ahead map snapshots to the event log at this interval")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="cross-product of router policies, QPS values and seeds")
    _add_common(p)
    p.add_argument("--policies", help="comma-separated router policies")
    p.add_argument("--qps-list", dest="qps_list", help="comma-separated QPS values")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train-forecaster", help="fit the window-level workload model")
    _add_common(p)
    p.set_defaults(seed=0)
    p.add_argument("--window", type=float, default=600.0)
    p.add_argument("--k", type=int, default=fc.DEFAULT_K)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_train_forecaster, run_dir="runs/forecaster")

    p = sub.add_parser("profile-capacity", help="measure per-instance serving capability")
    _add_common(p)
    p.add_argument("--window", type=float, default=600.0)
    p.add_argument("--ramp", default="0.5:4.0:15", help="LOW:HIGH:STEPS QPS ramp used when no trace is given")
    p.set_defaults(func=cmd_profile_capacity, instances=1)

    p = sub.add_parser("report", help="tabulate aggregates of finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fc.InsufficientData, fc.ProfilingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
