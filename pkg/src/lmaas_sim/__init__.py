"""Trace-driven discrete-event simulator of an LLM-serving cluster.

Modules: ``trace`` (workload input and generators), ``simcore`` (instances
and event loop), ``forecast`` (window-level workload model), ``loadpred``
(response-length predictors), ``anticipator`` (per-instance look-ahead KV
map), ``scaler`` and ``router`` (management policies), ``metrics`` and ``cli``.
"""

from .anticipator import LookAheadMap
from .forecast import CapacityProfile, ForecastModel, required_instances, train_forecaster
from .loadpred import NoiseParams, calibrate_noise, make_predictor
from .metrics import MetricsConfig, build_report
from .router import RouterConfig, make_router
from .scaler import ScalerConfig, make_scaler
from .simcore import CostModel, Policies, SimConfig, Simulator
from .trace import TraceRecord, generate_periodic, generate_poisson, load_trace

__version__ = "0.1.0"

__all__ = [
    "CapacityProfile", "CostModel", "ForecastModel", "LookAheadMap", "MetricsConfig", "NoiseParams",
    "Policies", "RouterConfig", "ScalerConfig", "SimConfig", "Simulator", "TraceRecord",
    "build_report", "calibrate_noise", "generate_periodic", "generate_poisson", "load_trace",
    "make_predictor", "make_router", "make_scaler", "required_instances", "train_forecaster",
]
