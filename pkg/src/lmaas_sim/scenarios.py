"""Ready-made experiment setups shared by the CLI, demos and acceptance tests.

Three families:

* forecasting on a week-long periodic trace (train on the first days, test on the rest);
* routing on a fixed pool of four instances under Poisson load near the overload boundary;
* scaling on compressed synthetic days with an unforecast load spike.

Compressed days keep the scaling runs short on one CPU core: a "day" is 24
windows of two minutes, so every window still spans many routing decisions
and several scaler ticks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import forecast as fc
from .loadpred import NoiseParams, calibrate_noise, make_predictor
from .metrics import MetricsConfig, build_report, peak_interval_latency, per_request
from .router import RouterConfig, make_router
from .scaler import FORECAST_SCALERS, ScalerConfig, make_scaler
from .simcore import CostModel, Policies, SimConfig, Simulator
from .trace import (
    LogNormalLengths,
    TraceRecord,
    _profile_curve,
    aggregate_windows,
    generate_periodic,
    generate_poisson,
)

logger = logging.getLogger(__name__)

# Hourly multipliers: trough before dawn, broad afternoon peak (peak/trough 5.7).
DAY_PROFILE = tuple(float(v) for v in 0.6 - 0.35 * np.cos(2 * np.pi * (np.arange(24) - 2) / 24))

_NOISE_CACHE: Dict[Tuple, NoiseParams] = {}


def reference_noise(seed: int = 0) -> NoiseParams:
    """Noise parameters calibrated to the published predictor profile (memoised)."""
    key = ("reference", seed)
    if key not in _NOISE_CACHE:
        _NOISE_CACHE[key] = calibrate_noise(seed=seed)
    return _NOISE_CACHE[key]


def peak_mask(n_windows: int, window: float, day_length: float, profile=DAY_PROFILE,
              first_window: int = 0, min_weight: float = 0.5) -> np.ndarray:
    """Windows whose position in the day puts them in the upper half of the profile's swing."""
    prof = np.asarray(profile, dtype=float)
    mids = (np.arange(first_window, first_window + n_windows) * window + window / 2) % day_length / day_length
    shape = _profile_curve(prof, mids)
    return (shape - prof.min()) / (prof.max() - prof.min()) >= min_weight


# ---------------------------------------------------------------------------
# Forecasting


@dataclass
class ForecastScenario:
    days: int = 7
    train_days: int = 4
    base_tps: float = 500.0
    noise: float = 0.10
    peak_jitter: float = 0.20
    window: float = 600.0
    day_length: float = 86_400.0
    k: int = fc.DEFAULT_K
    hidden: int = 32
    epochs: int = 600
    learning_rate: float = 0.01
    seed: int = 3
    model_seed: int = 0


@dataclass
class ForecastOutcome:
    model: fc.ForecastModel
    predictions: np.ndarray  # (test windows, 2)
    actual: np.ndarray
    naive: np.ndarray
    peak: np.ndarray
    ape: Dict[str, Dict[str, Optional[float]]]
    peak_mape: Dict[str, float]
    naive_peak_mape: Dict[str, float]

    @property
    def mean_ape(self) -> float:
        return float(np.mean([self.ape[s]["mean_ape"] for s in ("prompt", "decode")]))


def _mape(pred, act) -> float:
    keep = act > 0
    return float(np.mean(np.abs(pred[keep] - act[keep]) / act[keep]))


def run_forecast(sc: ForecastScenario = ForecastScenario()) -> ForecastOutcome:
    from .metrics import forecast_accuracy

    per_day = int(round(sc.day_length / sc.window))
    trace = generate_periodic(DAY_PROFILE, sc.base_tps, sc.days, sc.peak_jitter, sc.seed,
                              noise=sc.noise, day_length=sc.day_length, window=sc.window)
    windows = aggregate_windows(trace, sc.window, n_windows=sc.days * per_day)
    split = sc.train_days * per_day
    train, test = windows[:split], windows[split:]
    model = fc.train_forecaster(train, sc.k, sc.hidden, sc.learning_rate, sc.epochs, sc.model_seed)
    pred = fc.rolling_forecast(model, train, test, horizon=2)
    act = np.array([[w.prompt_total, w.decode_total] for w in test], dtype=float)
    naive_model = fc.SeasonalNaive(per_day)
    hist = np.array([[w.prompt_total, w.decode_total] for w in train], dtype=float)
    naive = np.stack([naive_model.rolling(hist[:, j], act[:, j]) for j in range(2)], axis=1)
    peak = peak_mask(len(test), sc.window, sc.day_length, first_window=split)
    names = ("prompt", "decode")
    return ForecastOutcome(
        model=model, predictions=pred, actual=act, naive=naive, peak=peak,
        ape={n: forecast_accuracy(pred[:, j], act[:, j]) for j, n in enumerate(names)},
        peak_mape={n: _mape(pred[peak, j], act[peak, j]) for j, n in enumerate(names)},
        naive_peak_mape={n: _mape(naive[peak, j], act[peak, j]) for j, n in enumerate(names)},
    )


# ---------------------------------------------------------------------------
# Routing (fixed pool)


@dataclass
class RoutingScenario:
    instances: int = 4
    kv_capacity: int = 6000
    duration: float = 600.0
    qps_below: Tuple[float, ...] = (8.0,)
    qps_boundary: Tuple[float, ...] = (9.5, 10.0)
    seeds: Tuple[int, ...] = (1, 2, 3)
    policies: Tuple[str, ...] = ("load_aware", "lr", "mu")
    predictor: str = "noisy"


def routing_config(sc: RoutingScenario) -> SimConfig:
    return SimConfig(kv_capacity=sc.kv_capacity, initial_instances=sc.instances,
                     min_instances=sc.instances, max_instances=sc.instances, check_invariants=True)


def run_routing_cell(policy: str, qps: float, seed: int, sc: RoutingScenario = RoutingScenario(),
                     cost: Optional[CostModel] = None, predictor: Optional[str] = None):
    """One simulation of the fixed pool. Returns ``(SimResult, MetricsReport)``."""
    trace = generate_poisson(qps, sc.duration, seed=seed)
    pred_name = predictor or sc.predictor
    params = reference_noise() if pred_name == "noisy" else None
    pred = make_predictor(pred_name, seed=seed, params=params)
    sim = Simulator(trace, Policies(make_router(policy), None, pred, None), cost or CostModel(), routing_config(sc))
    result = sim.run()
    return result, build_report(result, MetricsConfig(), {"policy": policy, "qps": qps, "seed": seed})


# ---------------------------------------------------------------------------
# Capacity profiling


def ramp_trace(qps_levels: Sequence[float], window: float, seed: int = 100,
               lengths: Optional[LogNormalLengths] = None) -> List[TraceRecord]:
    """Stepwise-increasing Poisson load, one level per window."""
    recs: List[TraceRecord] = []
    for i, q in enumerate(qps_levels):
        recs += generate_poisson(q, window, lengths, seed=seed + i, start=i * window)
    recs.sort(key=lambda r: r.arrival_time)
    return [TraceRecord(r.arrival_time, r.prompt_tokens, r.response_tokens, f"ramp-{n}") for n, r in enumerate(recs)]


def measure_capacity(window: float, cost: Optional[CostModel] = None, kv_capacity: int = 6000,
                     qps_levels: Sequence[float] = tuple(np.linspace(0.5, 4.0, 15)), slo: float = 0.2,
                     seed: int = 100) -> fc.CapacityProfile:
    """Per-instance serving capability measured on one instance under a load ramp."""
    trace = ramp_trace(qps_levels, window, seed)
    cfg = SimConfig(kv_capacity=kv_capacity, initial_instances=1, min_instances=1, max_instances=1)
    res = Simulator(trace, Policies(make_router("load_aware"), None, make_predictor("oracle"), None),
                    cost or CostModel(), cfg).run()
    return fc.profile_capacity([per_request(r, slo) for r in res.requests], window, slo)


# ---------------------------------------------------------------------------
# Scaling (compressed days with a spike)


@dataclass
class ScalingScenario:
    window: float = 120.0
    windows_per_day: int = 24
    train_days: int = 8
    test_days: int = 2
    base_tps: float = 1800.0
    noise: float = 0.10
    peak_jitter: float = 0.20
    spike_window: int = 30  # index within the test trace (second day, morning ramp)
    spike_windows: int = 2
    spike_multiplier: float = 1.5
    max_instances: int = 8
    min_instances: int = 1
    kv_capacity: int = 6000
    interval: float = 30.0  # latency/instance timeline bucket
    seed: int = 11
    model_seed: int = 0
    epochs: int = 600

    @property
    def day_length(self) -> float:
        return self.window * self.windows_per_day

    @property
    def spike(self) -> Tuple[float, float, float]:
        s = self.spike_window * self.window
        return (s, s + self.spike_windows * self.window, self.spike_multiplier)


@dataclass
class ScalingSetup:
    scenario: ScalingScenario
    capacity: fc.CapacityProfile
    model: fc.ForecastModel
    history: List
    test_trace: List[TraceRecord]
    test_windows: List
    needs: List[int]


def prepare_scaling(sc: ScalingScenario = ScalingScenario(), cost: Optional[CostModel] = None) -> ScalingSetup:
    cost = cost or CostModel()
    cap = measure_capacity(sc.window, cost, sc.kv_capacity)
    train = generate_periodic(DAY_PROFILE, sc.base_tps, sc.train_days, sc.peak_jitter, sc.seed,
                              noise=sc.noise, day_length=sc.day_length, window=sc.window)
    test = generate_periodic(DAY_PROFILE, sc.base_tps, sc.test_days, sc.peak_jitter, sc.seed + 1,
                             noise=sc.noise, day_length=sc.day_length, window=sc.window, spikes=[sc.spike])
    history = aggregate_windows(train, sc.window, n_windows=sc.train_days * sc.windows_per_day)
    test_windows = aggregate_windows(test, sc.window, n_windows=sc.test_days * sc.windows_per_day)
    model = fc.train_forecaster(history, epochs=sc.epochs, seed=sc.model_seed)
    needs = [fc.required_instances(w.prompt_total, w.decode_total, sc.window, cap, sc.min_instances, sc.max_instances)
             for w in test_windows]
    return ScalingSetup(sc, cap, model, history, test, test_windows, needs)


def run_scaling(setup: ScalingSetup, scaler: Optional[str], predictor: str = "noisy",
                fixed: Optional[int] = None, router: str = "load_aware", cost: Optional[CostModel] = None,
                seed: int = 1):
    """Replay the test trace under one scaling policy; ``fixed`` pins a static pool instead."""
    sc = setup.scenario
    if fixed is not None:
        cfg = SimConfig(kv_capacity=sc.kv_capacity, initial_instances=fixed, min_instances=fixed,
                        max_instances=fixed, window_length=sc.window, sample_interval=sc.interval,
                        check_invariants=True)
        scaler_obj, forecaster = None, None
    else:
        cfg = SimConfig(kv_capacity=sc.kv_capacity, initial_instances=setup.needs[0],
                        min_instances=sc.min_instances, max_instances=sc.max_instances,
                        window_length=sc.window, sample_interval=sc.interval, check_invariants=True)
        scaler_obj = make_scaler(scaler, ScalerConfig(min_instances=sc.min_instances, max_instances=sc.max_instances))
        forecaster = None
        if scaler in FORECAST_SCALERS:
            forecaster = fc.WindowForecaster(setup.model, setup.capacity, setup.history, sc.window,
                                             sc.min_instances, sc.max_instances)
    params = reference_noise() if predictor == "noisy" else None
    pred = make_predictor(predictor, seed=seed, params=params)
    res = Simulator(setup.test_trace, Policies(make_router(router), scaler_obj, pred, forecaster),
                    cost or CostModel(), cfg).run()
    label = f"static-{fixed}" if fixed is not None else scaler
    rep = build_report(res, MetricsConfig(aggregation_interval=sc.interval),
                       {"scaler": label, "predictor": predictor, "router": router})
    return res, rep


def spike_peak(report, sc: ScalingScenario) -> Optional[float]:
    """Peak interval-mean normalized latency for requests arriving during the spike (plus one window)."""
    s, e, _ = sc.spike
    return peak_interval_latency(report.rows, sc.interval, s, e + sc.window)


def run_peak(report, sc: ScalingScenario) -> Optional[float]:
    return peak_interval_latency(report.rows, sc.interval)
