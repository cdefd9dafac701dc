"""Window-level workload forecasting and instance-count estimation.

Offline: per-window prompt/decode token totals are min-max normalised over
the training span, cut into ``k -> 1`` training pairs and fitted by one mLSTM
per series. The per-instance serving capability ``(mu_p, mu_d, mu_t)`` is the
largest prefill/decode/total token rate seen in a window whose requests all
met the SLO.

Online: at the start of window ``i`` the model predicts window ``i`` from the
history, appends that estimate and predicts window ``i + 1``. The instance
requirement is ``ceil(max(P/mu_p, D/mu_d, (P + D)/mu_t))`` with the totals
expressed as rates. Ground truth replaces the estimate once a window closes.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .mlstm import MLSTM, PARAM_NAMES
from .trace import WindowAggregate

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_K = 12


class InsufficientData(ValueError):
    pass


class ForecastStateError(RuntimeError):
    pass


class ProfilingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Normalisation


@dataclass
class Bounds:
    lo: float
    hi: float

    @classmethod
    def of(cls, values) -> "Bounds":
        v = np.asarray(values, dtype=float)
        return cls(float(v.min()), float(v.max()))

    @property
    def degenerate(self) -> bool:
        return self.hi <= self.lo

    def normalize(self, x):
        x = np.asarray(x, dtype=float)
        if self.degenerate:
            return np.zeros_like(x)
        return (x - self.lo) / (self.hi - self.lo)

    def denormalize(self, y):
        y = np.asarray(y, dtype=float)
        if self.degenerate:
            return np.full_like(y, self.lo)
        return y * (self.hi - self.lo) + self.lo

    def widen(self, value: float) -> bool:
        changed = False
        if value < self.lo:
            self.lo, changed = float(value), True
        if value > self.hi:
            self.hi, changed = float(value), True
        return changed


@dataclass
class ForecastSeries:
    """Raw per-window histories plus the bounds used to normalise them."""

    prompt: List[float]
    decode: List[float]
    prompt_bounds: Bounds
    decode_bounds: Bounds
    k: int = DEFAULT_K

    @classmethod
    def from_windows(cls, windows: Sequence[WindowAggregate], k: int = DEFAULT_K,
                     bounds: Optional[Tuple[Bounds, Bounds]] = None) -> "ForecastSeries":
        p = [float(w.prompt_total) for w in windows]
        d = [float(w.decode_total) for w in windows]
        if bounds is None:
            bounds = (Bounds.of(p or [0.0]), Bounds.of(d or [0.0]))
        else:
            bounds = (Bounds(bounds[0].lo, bounds[0].hi), Bounds(bounds[1].lo, bounds[1].hi))
        s = cls(p, d, bounds[0], bounds[1], k)
        for v in p:
            s.prompt_bounds.widen(v)
        for v in d:
            s.decode_bounds.widen(v)
        return s

    def __len__(self) -> int:
        return len(self.prompt)

    def normalized(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.prompt_bounds.normalize(self.prompt), self.decode_bounds.normalize(self.decode)


def update_history(series: ForecastSeries, prompt_total: float, decode_total: float) -> ForecastSeries:
    """Append a concluded window's ground truth, widening the bounds if it falls outside them."""
    series.prompt.append(float(prompt_total))
    series.decode.append(float(decode_total))
    series.prompt_bounds.widen(prompt_total)
    series.decode_bounds.widen(decode_total)
    return series


# ---------------------------------------------------------------------------
# Training data


@dataclass
class TrainingSet:
    prompt_x: np.ndarray
    prompt_y: np.ndarray
    decode_x: np.ndarray
    decode_y: np.ndarray
    prompt_bounds: Bounds
    decode_bounds: Bounds


def _pairs(values: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    n = len(values)
    idx = np.arange(k)[None, :] + np.arange(n - k)[:, None]
    return values[idx], values[k:]


def build_training_set(windows: Sequence[WindowAggregate], k: int = DEFAULT_K) -> TrainingSet:
    """``(n - k)`` sliding ``k -> 1`` pairs per series, normalised over the whole span."""
    n = len(windows)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n <= k:
        raise InsufficientData(f"need more than k={k} windows, got {n}")
    p = np.array([w.prompt_total for w in windows], dtype=float)
    d = np.array([w.decode_total for w in windows], dtype=float)
    pb, db = Bounds.of(p), Bounds.of(d)
    px, py = _pairs(pb.normalize(p), k)
    dx, dy = _pairs(db.normalize(d), k)
    return TrainingSet(px, py, dx, dy, pb, db)


# ---------------------------------------------------------------------------
# Model


@dataclass
class ForecastModel:
    k: int = DEFAULT_K
    hidden: int = 32
    learning_rate: float = 0.01
    epochs: int = 600
    seed: int = 0
    prompt_net: Optional[MLSTM] = None
    decode_net: Optional[MLSTM] = None
    prompt_bounds: Optional[Bounds] = None
    decode_bounds: Optional[Bounds] = None
    loss_history: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return self.prompt_net is not None and self.decode_net is not None

    def fit(self, data: TrainingSet) -> "ForecastModel":
        self.prompt_net = MLSTM(self.hidden, self.seed)
        self.decode_net = MLSTM(self.hidden, self.seed + 1)
        self.loss_history = {
            "prompt": self.prompt_net.fit(data.prompt_x, data.prompt_y, self.epochs, self.learning_rate),
            "decode": self.decode_net.fit(data.decode_x, data.decode_y, self.epochs, self.learning_rate),
        }
        self.prompt_bounds = Bounds(data.prompt_bounds.lo, data.prompt_bounds.hi)
        self.decode_bounds = Bounds(data.decode_bounds.lo, data.decode_bounds.hi)
        return self

    def final_loss(self) -> float:
        return float(self.loss_history["prompt"][-1] + self.loss_history["decode"][-1]) / 2

    def new_series(self, windows: Sequence[WindowAggregate] = ()) -> ForecastSeries:
        if not self.trained:
            raise ForecastStateError("model is not trained")
        return ForecastSeries.from_windows(windows, self.k, (self.prompt_bounds, self.decode_bounds))

    # -- checkpoints ------------------------------------------------------------------

    def save(self, path) -> None:
        if not self.trained:
            raise ForecastStateError("cannot save an untrained model")
        meta = {
            "version": CHECKPOINT_VERSION,
            "k": self.k, "hidden": self.hidden, "learning_rate": self.learning_rate,
            "epochs": self.epochs, "seed": self.seed,
            "prompt_bounds": [self.prompt_bounds.lo, self.prompt_bounds.hi],
            "decode_bounds": [self.decode_bounds.lo, self.decode_bounds.hi],
            "final_loss": self.final_loss(),
        }
        arrays = {f"prompt.{k}": v for k, v in self.prompt_net.params.items()}
        arrays.update({f"decode.{k}": v for k, v in self.decode_net.params.items()})
        buf = io.BytesIO()
        np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "ForecastModel":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ForecastStateError(f"unsupported checkpoint version {meta.get('version')}")
            m = cls(meta["k"], meta["hidden"], meta["learning_rate"], meta["epochs"], meta["seed"])
            m.prompt_net = MLSTM(m.hidden, m.seed, {n: z[f"prompt.{n}"].copy() for n in PARAM_NAMES})
            m.decode_net = MLSTM(m.hidden, m.seed + 1, {n: z[f"decode.{n}"].copy() for n in PARAM_NAMES})
        m.prompt_bounds = Bounds(*meta["prompt_bounds"])
        m.decode_bounds = Bounds(*meta["decode_bounds"])
        return m


def train_forecaster(windows: Sequence[WindowAggregate], k: int = DEFAULT_K, hidden: int = 32,
                     learning_rate: float = 0.01, epochs: int = 600, seed: int = 0) -> ForecastModel:
    data = build_training_set(windows, k)
    return ForecastModel(k, hidden, learning_rate, epochs, seed).fit(data)


def _predict_one(net: MLSTM, bounds: Bounds, history: Sequence[float], k: int) -> float:
    x = bounds.normalize(np.asarray(history[-k:], dtype=float))
    y = float(net.predict(x[None, :])[0])
    return float(bounds.denormalize(y))


def predict_two_step(model: ForecastModel, series: ForecastSeries) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Returns ``((P_i, D_i), (P_i+1, D_i+1))`` estimates, clamped at zero."""
    if not model.trained:
        raise ForecastStateError("model is not trained")
    k = model.k
    if len(series) < k:
        raise ForecastStateError(f"history has {len(series)} windows, need k={k}")
    p_hist, d_hist = list(series.prompt), list(series.decode)
    p_cur = max(0.0, _predict_one(model.prompt_net, series.prompt_bounds, p_hist, k))
    d_cur = max(0.0, _predict_one(model.decode_net, series.decode_bounds, d_hist, k))
    p_next = max(0.0, _predict_one(model.prompt_net, series.prompt_bounds, p_hist + [p_cur], k))
    d_next = max(0.0, _predict_one(model.decode_net, series.decode_bounds, d_hist + [d_cur], k))
    return (p_cur, d_cur), (p_next, d_next)


def predict_next_window(model: ForecastModel, series: ForecastSeries) -> Tuple[float, float]:
    """Two-step forecast of the token totals of the window after the current one."""
    return predict_two_step(model, series)[1]


def rolling_forecast(model: ForecastModel, history: Sequence[WindowAggregate],
                     future: Sequence[WindowAggregate], horizon: int = 2) -> np.ndarray:
    """Replay the online loop over ``future`` windows.

    Returns an array of shape (len(future), 2) whose row ``j`` is the forecast
    for ``future[j]`` made ``horizon`` windows earlier (``horizon`` 2 is the
    two-step estimate used for scaling, 1 the current-window estimate).
    Windows without enough lead time are predicted with the shortest lead available.
    """
    if horizon not in (1, 2):
        raise ValueError("horizon must be 1 or 2")
    series = model.new_series(history)
    out = np.zeros((len(future), 2))
    for j in range(len(future)):
        if horizon == 2 and j >= 1:
            # Made at the start of window j-1, before its ground truth was known.
            out[j] = _two_step_at(model, series, len(history) + j - 1)[1]
        else:
            out[j] = _two_step_at(model, series, len(history) + j)[0]
        update_history(series, future[j].prompt_total, future[j].decode_total)
    return out


def _two_step_at(model, series: ForecastSeries, upto: int):
    view = ForecastSeries(series.prompt[:upto], series.decode[:upto], series.prompt_bounds, series.decode_bounds, series.k)
    return predict_two_step(model, view)


def retrain(model: ForecastModel, recent: Sequence[WindowAggregate]) -> ForecastModel:
    """Fit a fresh model on ``recent`` windows; keep ``model`` if data is short or training fails."""
    try:
        data = build_training_set(recent, model.k)
    except InsufficientData as exc:
        logger.warning("retrain skipped, keeping previous model: %s", exc)
        return model
    fresh = ForecastModel(model.k, model.hidden, model.learning_rate, model.epochs, model.seed).fit(data)
    if not sanity_check(fresh):
        logger.warning("retrained model failed the sanity check; keeping previous model")
        return model
    return fresh


def sanity_check(model: ForecastModel) -> bool:
    """Training converged (final loss below initial) and outputs on constant inputs are finite."""
    for name in ("prompt", "decode"):
        hist = model.loss_history.get(name) or []
        if not hist or not np.isfinite(hist[-1]) or hist[-1] > hist[0]:
            return False
    probe = np.full((3, model.k), 0.5) * np.array([[0.5], [1.0], [1.5]])
    return bool(np.all(np.isfinite(model.prompt_net.predict(probe))) and np.all(np.isfinite(model.decode_net.predict(probe))))


class SeasonalNaive:
    """Forecasts each window with the value one period earlier."""

    def __init__(self, period: int):
        if period < 1:
            raise ValueError("period must be >= 1")
        self.period = period

    def forecast(self, history: Sequence[float], steps_ahead: int = 1) -> float:
        idx = len(history) + steps_ahead - 1 - self.period
        if idx < 0:
            raise InsufficientData("history shorter than one period")
        return float(history[idx])

    def rolling(self, history: Sequence[float], future: Sequence[float], horizon: int = 2) -> np.ndarray:
        values = list(history) + list(future)
        n0 = len(history)
        return np.array([values[n0 + j - self.period] for j in range(len(future))], dtype=float)


# ---------------------------------------------------------------------------
# Capacity profile and instance count


@dataclass(frozen=True)
class CapacityProfile:
    mu_p: float
    mu_d: float
    mu_t: float

    def __post_init__(self):
        if min(self.mu_p, self.mu_d, self.mu_t) <= 0:
            raise ProfilingError("capacity rates must be strictly positive")

    def as_dict(self) -> Dict[str, float]:
        return {"mu_p": self.mu_p, "mu_d": self.mu_d, "mu_t": self.mu_t}

    @classmethod
    def from_dict(cls, d: Dict[str, float]) -> "CapacityProfile":
        return cls(float(d["mu_p"]), float(d["mu_d"]), float(d["mu_t"]))


def profile_capacity(rows, window_length: float, slo: float = 0.2) -> CapacityProfile:
    """Max per-instance token rates over violation-free (window, instance) cells.

    ``rows`` are per-request metric rows (arrival time, serving instance,
    token counts, SLO flag). A cell is violation-free when none of its
    requests was aborted or missed the SLO.
    """
    cells: Dict[Tuple[int, int], List] = {}
    for r in rows:
        if r.instance is None:
            continue
        cells.setdefault((int(r.arrival_time // window_length), r.instance), []).append(r)
    mu_p = mu_d = mu_t = 0.0
    clean = 0
    for reqs in cells.values():
        if any(r.aborted or r.normalized_latency > slo for r in reqs):
            continue
        clean += 1
        p = sum(r.prompt_tokens for r in reqs) / window_length
        d = sum(r.response_tokens for r in reqs) / window_length
        mu_p, mu_d, mu_t = max(mu_p, p), max(mu_d, d), max(mu_t, p + d)
    if clean == 0:
        raise ProfilingError("no violation-free window; run a calibration trace at lower load")
    return CapacityProfile(mu_p, mu_d, mu_t)


def profile_from_windows(window_rates: Sequence[Tuple[float, float, bool]]) -> CapacityProfile:
    """Same maxima from pre-aggregated ``(prefill_rate, decode_rate, violation_free)`` records."""
    ok = [(p, d) for p, d, clean in window_rates if clean]
    if not ok:
        raise ProfilingError("no violation-free window; run a calibration trace at lower load")
    return CapacityProfile(max(p for p, _ in ok), max(d for _, d in ok), max(p + d for p, d in ok))


def required_instances(prompt_total: float, decode_total: float, window_length: float,
                       cap: CapacityProfile, minimum: int = 1, maximum: Optional[int] = None) -> int:
    """Instances needed for a window's predicted token totals (rates = totals / window length)."""
    p = prompt_total / window_length
    d = decode_total / window_length
    need = max(p / cap.mu_p, d / cap.mu_d, (p + d) / cap.mu_t)
    # Guard against float noise turning an exact boundary into one extra instance.
    n = max(minimum, math.ceil(need - 1e-9))
    return min(n, maximum) if maximum is not None else n


# ---------------------------------------------------------------------------
# Online policy object used by the simulator


class WindowForecaster:
    """Feeds the simulator a target instance count at each window boundary."""

    def __init__(self, model: ForecastModel, cap: CapacityProfile, history: Sequence[WindowAggregate],
                 window_length: float, minimum: int = 1, maximum: Optional[int] = None,
                 retrain_every: Optional[int] = None, retrain_span: Optional[int] = None):
        self.model = model
        self.cap = cap
        self.window_length = window_length
        self.minimum = minimum
        self.maximum = maximum
        self.series = model.new_series(history)
        self.retrain_every = retrain_every
        self.retrain_span = retrain_span
        self.log: List[Dict[str, float]] = []
        self._seen = 0

    def window_target(self, prev_actual: Optional[Tuple[float, float]]) -> int:
        if prev_actual is not None:
            update_history(self.series, *prev_actual)
            self._seen += 1
            if self.retrain_every and self._seen % self.retrain_every == 0:
                span = self.retrain_span or len(self.series)
                recent = [WindowAggregate(i, int(p), int(d), self.window_length)
                          for i, (p, d) in enumerate(zip(self.series.prompt[-span:], self.series.decode[-span:]))]
                self.model = retrain(self.model, recent)
        (p_cur, d_cur), (p_next, d_next) = predict_two_step(self.model, self.series)
        n_cur = required_instances(p_cur, d_cur, self.window_length, self.cap, self.minimum, self.maximum)
        n_next = required_instances(p_next, d_next, self.window_length, self.cap, self.minimum, self.maximum)
        self.log.append({"p_cur": p_cur, "d_cur": d_cur, "p_next": p_next, "d_next": d_next,
                         "n_cur": n_cur, "n_next": n_next})
        # Cover the window that is starting as well as the one being pre-initialised for.
        return max(n_cur, n_next)


class ExactForecaster:
    """Target counts computed from known future window totals (for constructed scenarios)."""

    def __init__(self, windows: Sequence[WindowAggregate], cap: CapacityProfile, window_length: float,
                 minimum: int = 1, maximum: Optional[int] = None):
        self.needs = [required_instances(w.prompt_total, w.decode_total, window_length, cap, minimum, maximum)
                      for w in windows]
        self.minimum = minimum
        self.i = 0

    def window_target(self, prev_actual) -> int:
        i = self.i
        self.i += 1
        cur = self.needs[i] if i < len(self.needs) else self.minimum
        nxt = self.needs[i + 1] if i + 1 < len(self.needs) else cur
        return max(cur, nxt)


class FixedForecaster:
    """Always returns the same target; useful for tests and static baselines."""

    def __init__(self, target: int):
        self.target = target

    def window_target(self, prev_actual) -> int:
        return self.target
