"""Instance scalers.

The proactive scaler acts on two time scales:

* at every window boundary it moves the active+booting count ``N_c`` to the
  forecast requirement, booting cold instances or isolating the emptiest;
* every ``scaler_tick`` seconds it inspects each instance's look-ahead map.
  An instance projected above 95% KV usage for more than 10% of the next
  ``l`` iterations asks for one more instance. When every active instance stays
  below ``T_f`` for the whole horizon, the cluster shrinks to
  ``ceil(sum(max U') / T_f)`` instances, at most once per window.

Baselines: ``reactive`` watches mean current KV usage, ``proactive`` only acts
at window boundaries, ``hybrid`` combines both without the anticipator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

from .anticipator import DEFAULT_HORIZON
from .simcore import InstanceStatus, ScaleAction

logger = logging.getLogger(__name__)

REASON_WINDOW = "window-forecast"
REASON_OVERLOAD = "overload-anticipated"
REASON_UNDERLOAD = "underload"


@dataclass(frozen=True)
class ScalerConfig:
    overload_usage_threshold: float = 0.95
    overload_iteration_fraction: float = 0.10
    horizon: int = DEFAULT_HORIZON
    scale_down_threshold: float = 0.30  # T_f
    min_instances: int = 1
    max_instances: int = 8
    scaler_tick: float = 10.0
    high_watermark: float = 0.90
    low_watermark: float = 0.30

    def __post_init__(self):
        for name in ("overload_usage_threshold", "overload_iteration_fraction", "scale_down_threshold",
                     "high_watermark", "low_watermark"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.low_watermark >= self.high_watermark:
            raise ValueError("low_watermark must be below high_watermark")
        if self.min_instances < 0 or self.min_instances > self.max_instances or self.max_instances < 1:
            raise ValueError("need 0 <= min_instances <= max_instances, max_instances >= 1")
        if self.horizon < 1 or self.scaler_tick <= 0:
            raise ValueError("horizon and scaler_tick must be positive")


@dataclass
class ScalerState:
    current: int = 0  # N_c
    predicted: Optional[int] = None  # N_{i+1}
    scale_down_used: bool = False


def _count(cluster) -> int:
    return cluster.current_count()


def _booting(cluster) -> int:
    return len(cluster.by_status(InstanceStatus.BOOTING))


def window_boundary(state: ScalerState, target: Optional[int], cluster, config: ScalerConfig) -> List[ScaleAction]:
    """Move ``N_c`` to the forecast requirement and reset the scale-down flag."""
    state.scale_down_used = False
    state.current = _count(cluster)
    if target is None:
        return []
    clamped = min(max(int(target), config.min_instances), config.max_instances)
    if clamped != target:
        logger.warning("forecast requirement %s clamped to %s", target, clamped)
    state.predicted = clamped
    delta = clamped - state.current
    if delta > 0:
        return [ScaleAction("boot", delta, REASON_WINDOW)]
    if delta < 0:
        return [ScaleAction("isolate", -delta, REASON_WINDOW)]
    return []


def isolation_count(current: int, peaks, threshold: float, minimum: int = 1) -> int:
    """Instances to isolate so that the survivors could hold every peak below ``threshold``."""
    # Round before the ceiling so 0.9 / 0.3 does not become 3.0000000000000004 -> 4.
    keep = math.ceil(round(sum(peaks) / threshold, 9))
    return max(0, current - max(minimum, keep))


def within_window_tick(state: ScalerState, cluster, config: ScalerConfig) -> List[ScaleAction]:
    active = cluster.active
    state.current = _count(cluster)
    if not active:
        return []
    h = config.horizon
    overloaded = sum(
        1 for inst in active
        if inst.lookahead.overload_fraction(min(h, inst.lookahead.length), config.overload_usage_threshold)
        > config.overload_iteration_fraction
    )
    if overloaded:
        # Instances already booting were started for earlier overload signals.
        need = overloaded - _booting(cluster)
        room = config.max_instances - state.current
        n = min(need, room)
        if n > 0:
            return [ScaleAction("boot", n, REASON_OVERLOAD)]
        return []
    if state.scale_down_used:
        return []
    peaks = [inst.lookahead.peek_peak(min(h, inst.lookahead.length)) for inst in active]
    if all(p < config.scale_down_threshold for p in peaks):
        n = isolation_count(state.current, peaks, config.scale_down_threshold, config.min_instances)
        state.scale_down_used = True
        if n > 0:
            return [ScaleAction("isolate", n, REASON_UNDERLOAD)]
    return []


def baseline_reactive(cluster, config: ScalerConfig) -> List[ScaleAction]:
    """One instance up above the high watermark, one down below the low watermark."""
    active = cluster.active
    if not active:
        return []
    mean = sum(i.kv_usage for i in active) / len(active)
    n = _count(cluster)
    if mean > config.high_watermark:
        if n < config.max_instances:
            return [ScaleAction("boot", 1, REASON_OVERLOAD)]
    elif mean < config.low_watermark and n > config.min_instances:
        return [ScaleAction("isolate", 1, REASON_UNDERLOAD)]
    return []


# ---------------------------------------------------------------------------
# Policy objects driven by the simulator


class ProactiveScaler:
    """Forecast at window boundaries plus anticipator-driven adjustments inside windows."""

    name = "nailbench"

    def __init__(self, config: ScalerConfig = ScalerConfig()):
        self.config = config
        self.state = ScalerState()

    def on_window(self, cluster, now: float, target: Optional[int]) -> List[ScaleAction]:
        return window_boundary(self.state, target, cluster, self.config)

    def on_tick(self, cluster, now: float) -> List[ScaleAction]:
        return within_window_tick(self.state, cluster, self.config)


class ForecastOnlyScaler(ProactiveScaler):
    name = "proactive"

    def on_tick(self, cluster, now: float) -> List[ScaleAction]:
        return []


class ReactiveScaler:
    name = "reactive"

    def __init__(self, config: ScalerConfig = ScalerConfig()):
        self.config = config

    def on_tick(self, cluster, now: float) -> List[ScaleAction]:
        return baseline_reactive(cluster, self.config)


class HybridScaler(ProactiveScaler):
    name = "hybrid"

    def on_tick(self, cluster, now: float) -> List[ScaleAction]:
        return baseline_reactive(cluster, self.config)


SCALERS = {
    "nailbench": ProactiveScaler,
    "proactive": ForecastOnlyScaler,
    "reactive": ReactiveScaler,
    "hybrid": HybridScaler,
}

# Scalers that consume a window forecast.
FORECAST_SCALERS = {"nailbench", "proactive", "hybrid"}


def make_scaler(name: str, config: Optional[ScalerConfig] = None):
    key = name.lower()
    if key not in SCALERS:
        raise ValueError(f"unknown scaler {name!r}; choose from {sorted(SCALERS)}")
    return SCALERS[key](config or ScalerConfig())
