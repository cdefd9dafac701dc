"""Experiment configuration: one JSON object with a section per module.

Example::

    {
      "trace":    {"source": "poisson", "qps": 9.5, "duration": 600, "seed": 1},
      "cost":     {"cold_start_time": 30},
      "sim":      {"fixed_instances": 4, "kv_capacity": 6000},
      "router":   {"policy": "load_aware"},
      "scaler":   {"policy": null},
      "loadpred": {"predictor": "noisy", "seed": 0},
      "forecast": {},
      "metrics":  {"slo_normalized_latency": 0.2},
      "output":   {"run_dir": "runs/rq3"}
    }

Command-line flags override file values. :func:`resolve` returns the fully
populated configuration, which every report embeds for provenance, and
:func:`validate` checks every downstream invariant before a run starts.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Optional

from .loadpred import ErrorProfile, REFERENCE_PROFILE
from .metrics import MetricsConfig
from .router import ROUTERS, RouterConfig
from .scaler import FORECAST_SCALERS, SCALERS, ScalerConfig
from .simcore import CostModel, SimConfig
from .trace import LogNormalLengths


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (exit code 1)."""


SECTIONS = ("trace", "cost", "sim", "router", "scaler", "loadpred", "forecast", "metrics", "output")


def _defaults(cls) -> Dict[str, Any]:
    d = asdict(cls())
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def default_config() -> Dict[str, Any]:
    sim = _defaults(SimConfig)
    sim.pop("event_log")
    sim.pop("anticipator_dump_interval")
    sim["fixed_instances"] = None
    router = _defaults(RouterConfig)
    scaler = _defaults(ScalerConfig)
    for k in ("min_instances", "max_instances", "scaler_tick"):
        scaler.pop(k)  # taken from the sim section
    scaler["policy"] = None
    return {
        "trace": {
            "source": "poisson",  # poisson | periodic | file
            "path": None,
            "format": "csv",
            "qps": 9.5,
            "duration": 600.0,
            "seed": 1,
            "lengths": _defaults(LogNormalLengths),
            "day_profile": None,
            "base_tps": 1800.0,
            "days": 2,
            "peak_jitter": 0.2,
            "noise": 0.1,
            "day_length": 2880.0,
            "window": 120.0,
            "spikes": [],
        },
        "cost": _defaults(CostModel),
        "sim": sim,
        "router": router,
        "scaler": scaler,
        "loadpred": {
            "predictor": "oracle",
            "seed": 0,
            "profile": REFERENCE_PROFILE.as_dict(),
            "zero_mass": None,
            "scale": None,
            "max_tokens": 4096,
        },
        "forecast": {
            "checkpoint": None,
            "capacity": None,  # path to capacity.json or an inline {mu_p, mu_d, mu_t}
            "history": None,  # trace file whose windows seed the forecaster
            "history_format": "csv",
            "retrain_every": None,
        },
        "metrics": _defaults(MetricsConfig),
        "output": {"run_dir": "runs/default", "event_log": False, "dump_anticipator": None},
    }


def _merge(base: Dict[str, Any], over: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def load_file(path) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"configuration file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return data


def resolve(file_data: Optional[Dict[str, Any]] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Defaults, then file values, then flag overrides (dotted keys such as ``"trace.qps"``)."""
    cfg = default_config()
    if file_data:
        _merge(cfg, copy.deepcopy(file_data))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if section not in cfg or name not in cfg[section]:
            raise ConfigError(f"unknown override {key!r}")
        cfg[section][name] = value
    fixed = cfg["sim"].get("fixed_instances")
    if fixed is not None:
        cfg["sim"]["initial_instances"] = cfg["sim"]["min_instances"] = cfg["sim"]["max_instances"] = fixed
    return cfg


def _build(cls, values: Dict[str, Any], section: str):
    names = {f.name for f in fields(cls)}
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def sim_config(cfg: Dict[str, Any]) -> SimConfig:
    s = dict(cfg["sim"])
    s.pop("fixed_instances", None)
    out = cfg.get("output", {})
    sc = _build(SimConfig, s, "sim")
    sc.event_log = bool(out.get("event_log"))
    sc.anticipator_dump_interval = out.get("dump_anticipator")
    try:
        sc.validate()
    except ValueError as exc:
        raise ConfigError(f"[sim] {exc}") from exc
    return sc


def cost_model(cfg) -> CostModel:
    return _build(CostModel, cfg["cost"], "cost")


def router_config(cfg) -> RouterConfig:
    r = dict(cfg["router"])
    r["queue_capacity"] = cfg["sim"]["router_queue_capacity"]
    return _build(RouterConfig, r, "router")


def scaler_config(cfg) -> ScalerConfig:
    s = {k: v for k, v in cfg["scaler"].items() if k != "policy"}
    s.update(min_instances=cfg["sim"]["min_instances"], max_instances=cfg["sim"]["max_instances"],
             scaler_tick=cfg["sim"]["scaler_tick"])
    return _build(ScalerConfig, s, "scaler")


def metrics_config(cfg) -> MetricsConfig:
    return _build(MetricsConfig, cfg["metrics"], "metrics")


def lengths(cfg) -> LogNormalLengths:
    return _build(LogNormalLengths, cfg["trace"]["lengths"], "trace.lengths")


def validate(cfg: Dict[str, Any]) -> None:
    """Raise :class:`ConfigError` unless every section is usable."""
    for s in SECTIONS:
        if s not in cfg:
            raise ConfigError(f"missing section {s!r}")
    t = cfg["trace"]
    if t["source"] not in ("poisson", "periodic", "file"):
        raise ConfigError(f"[trace] unknown source {t['source']!r}")
    if t["source"] == "file":
        if not t["path"] or not Path(t["path"]).exists():
            raise ConfigError(f"[trace] trace file {t['path']!r} does not exist")
        if t["format"] not in ("csv", "azure"):
            raise ConfigError(f"[trace] unknown format {t['format']!r}")
    elif t["source"] == "poisson":
        if not (isinstance(t["qps"], (int, float)) and t["qps"] > 0 and math.isfinite(t["qps"])):
            raise ConfigError("[trace] qps must be a positive number")
        if t["duration"] < 0:
            raise ConfigError("[trace] duration must be >= 0")
    else:
        if t["base_tps"] <= 0 or t["days"] < 1 or t["window"] <= 0 or t["day_length"] <= 0:
            raise ConfigError("[trace] periodic generator needs base_tps > 0, days >= 1, window and day_length > 0")
        if not 0 <= t["peak_jitter"] < 1:
            raise ConfigError("[trace] peak_jitter must lie in [0, 1)")
    lengths(cfg)
    cost_model(cfg)
    sim_config(cfg)
    metrics_config(cfg)
    rc = router_config(cfg)
    if rc.policy.lower() not in ROUTERS:
        raise ConfigError(f"[router] unknown policy {rc.policy!r}; choose from {sorted(ROUTERS)}")

    lp = cfg["loadpred"]
    if lp["predictor"] not in ("oracle", "noisy", "heuristic"):
        raise ConfigError(f"[loadpred] unknown predictor {lp['predictor']!r}")
    try:
        ErrorProfile(**lp["profile"]).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[loadpred] {exc}") from exc
    if (lp["zero_mass"] is None) != (lp["scale"] is None):
        raise ConfigError("[loadpred] zero_mass and scale must be given together")

    policy = cfg["scaler"]["policy"]
    if policy is not None:
        if policy not in SCALERS:
            raise ConfigError(f"[scaler] unknown policy {policy!r}; choose from {sorted(SCALERS)}")
        if cfg["sim"].get("fixed_instances") is not None:
            raise ConfigError("fixed_instances and a scaler policy cannot be combined")
        scaler_config(cfg)
        if policy in FORECAST_SCALERS:
            f = cfg["forecast"]
            for key in ("checkpoint", "capacity", "history"):
                if f[key] is None:
                    raise ConfigError(f"[forecast] scaler {policy!r} needs forecast.{key}")
            for key in ("checkpoint", "history"):
                if not Path(f[key]).exists():
                    raise ConfigError(f"[forecast] {key} file {f[key]!r} does not exist")
            if isinstance(f["capacity"], str) and not Path(f["capacity"]).exists():
                raise ConfigError(f"[forecast] capacity file {f['capacity']!r} does not exist")


def dumps(cfg: Dict[str, Any]) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
