"""Service-quality, prediction-accuracy and resource metrics.

Per-request definitions:

* TTFT = first token time - arrival time
* TBT = gaps between consecutive tokens (mean and max are kept)
* normalized latency = (completion - arrival) / output tokens

Percentiles use the nearest-rank method. SLO attainment is reported over
completed requests and, separately, counting aborts as violations.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsConfig:
    slo_normalized_latency: float = 0.2
    percentiles: Tuple[float, ...] = (50.0, 90.0, 99.0)
    aggregation_interval: float = 300.0

    def __post_init__(self):
        if self.slo_normalized_latency <= 0:
            raise ValueError("SLO must be positive")
        if self.aggregation_interval <= 0:
            raise ValueError("aggregation_interval must be positive")


@dataclass
class RequestRow:
    request_id: int
    arrival_time: float
    prompt_tokens: int
    response_tokens: int
    predicted_tokens: int
    instance: Optional[int]
    aborted: bool
    abort_reason: str = ""
    ttft: Optional[float] = None
    mean_tbt: Optional[float] = None
    max_tbt: Optional[float] = None
    e2e_latency: Optional[float] = None
    normalized_latency: Optional[float] = None
    slo_met: Optional[bool] = None
    preemptions: int = 0


def per_request(req, slo: float = 0.2) -> RequestRow:
    """Metrics row for a finished request (completed or aborted)."""
    aborted = req.completion_time is None
    row = RequestRow(
        request_id=req.id,
        arrival_time=req.arrival_time,
        prompt_tokens=req.prompt_tokens,
        response_tokens=req.true_response_tokens,
        predicted_tokens=req.predicted_response_tokens,
        instance=req.instance,
        aborted=aborted,
        abort_reason=getattr(req, "abort_reason", "") if aborted else "",
        preemptions=getattr(req, "preemptions", 0),
    )
    if aborted:
        return row
    row.ttft = req.first_token_time - req.arrival_time
    row.e2e_latency = req.completion_time - req.arrival_time
    n = req.true_response_tokens
    row.normalized_latency = row.e2e_latency / n
    row.mean_tbt = (req.completion_time - req.first_token_time) / (n - 1) if n > 1 else 0.0
    row.max_tbt = getattr(req, "max_tbt", row.mean_tbt)
    row.slo_met = row.normalized_latency <= slo
    return row


def percentile(values: Sequence[float], q: float) -> Optional[float]:
    """Nearest-rank percentile; ``q`` in [0, 100]. None for empty input."""
    if not 0 <= q <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    v = sorted(values)
    if not v:
        return None
    if q == 0:
        return v[0]
    rank = math.ceil(q / 100.0 * len(v))
    return v[max(rank, 1) - 1]


def slo_attainment(rows: Iterable[RequestRow], slo: Optional[float] = None) -> Optional[float]:
    """Fraction of completed requests within the SLO; None if nothing completed."""
    done = [r for r in rows if not r.aborted]
    if not done:
        return None
    if slo is None:
        ok = sum(1 for r in done if r.slo_met)
    else:
        ok = sum(1 for r in done if r.normalized_latency <= slo)
    return ok / len(done)


def slo_attainment_with_aborts(rows: Sequence[RequestRow], slo: Optional[float] = None) -> Optional[float]:
    rows = list(rows)
    if not rows:
        return None
    done = slo_attainment(rows, slo)
    n_done = sum(1 for r in rows if not r.aborted)
    return (done or 0.0) * n_done / len(rows)


def forecast_accuracy(predictions: Sequence[float], actuals: Sequence[float]) -> Dict[str, Optional[float]]:
    """Mean and max absolute percentage error; windows with zero actual are skipped."""
    if len(predictions) != len(actuals):
        raise ValueError("predictions and actuals differ in length")
    p = np.asarray(predictions, dtype=float)
    a = np.asarray(actuals, dtype=float)
    keep = a > 0
    if not np.all(keep):
        logger.warning("skipping %d windows with zero actual load", int((~keep).sum()))
    if not keep.any():
        return {"mean_ape": None, "max_ape": None, "windows": 0}
    ape = np.abs(p[keep] - a[keep]) / a[keep]
    return {"mean_ape": float(ape.mean()), "max_ape": float(ape.max()), "windows": int(keep.sum())}


def length_accuracy(predicted: Sequence[int], actual: Sequence[int]) -> Dict[str, float]:
    """MAE and Acc-25/50/100 (inclusive) of response-length predictions."""
    if len(predicted) != len(actual):
        raise ValueError("predicted and actual lengths differ in size")
    if len(predicted) == 0:
        raise ValueError("no predictions given")
    d = np.abs(np.asarray(predicted, dtype=float) - np.asarray(actual, dtype=float))
    return {
        "mae": float(d.mean()),
        "acc25": float((d <= 25).mean()),
        "acc50": float((d <= 50).mean()),
        "acc100": float((d <= 100).mean()),
    }


def resource_consumption(count_series: Sequence[Tuple[float, int]], end_time: float,
                         start_time: float = 0.0) -> Dict[str, float]:
    """Integral of a piecewise-constant instance count over ``[start_time, end_time]``.

    ``count_series`` is a list of ``(time, count, ...)`` change points; the
    count holds until the next change point.
    """
    total = 0.0
    pts = sorted((float(t), c) for t, c, *_ in count_series)
    for k, (t, c) in enumerate(pts):
        nxt = pts[k + 1][0] if k + 1 < len(pts) else end_time
        lo, hi = max(t, start_time), min(nxt, end_time)
        if hi > lo:
            total += c * (hi - lo)
    span = end_time - start_time
    return {"instance_seconds": total, "mean_instances": total / span if span > 0 else 0.0}


def overhead(decision_latencies: Sequence[float], rows: Sequence[RequestRow]) -> Dict[str, Optional[float]]:
    """Mean per-request management cost and its ratio to the mean end-to-end latency."""
    if len(decision_latencies) == 0:
        return {"mean_overhead": None, "overhead_ratio": None}
    mean = float(np.mean(decision_latencies))
    e2e = [r.e2e_latency for r in rows if r.e2e_latency is not None]
    ratio = mean / float(np.mean(e2e)) if e2e and np.mean(e2e) > 0 else None
    return {"mean_overhead": mean, "overhead_ratio": ratio}


def peak_interval_latency(rows: Sequence[RequestRow], interval: float, start: float = 0.0,
                          end: float = math.inf) -> Optional[float]:
    """Largest per-interval mean normalized latency among requests arriving in ``[start, end)``."""
    buckets: Dict[int, List[float]] = {}
    for r in rows:
        if r.aborted or not (start <= r.arrival_time < end):
            continue
        buckets.setdefault(int(r.arrival_time // interval), []).append(r.normalized_latency)
    if not buckets:
        return None
    return max(float(np.mean(v)) for v in buckets.values())


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    rows: List[RequestRow]
    aggregates: Dict[str, Any]
    timeline: List[Dict[str, Any]]
    instance_timeline: List[Dict[str, Any]] = field(default_factory=list)
    scaling: List[Dict[str, Any]] = field(default_factory=list)
    timing: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    events: List[Dict[str, Any]] = field(default_factory=list)
    invariant_violations: List[str] = field(default_factory=list)

    # -- serialisation (timing is wall-clock and kept out of the deterministic files) --

    def aggregates_json(self) -> str:
        body = {"config": self.config, "aggregates": self.aggregates, "scaling": self.scaling}
        return json.dumps(body, indent=2, sort_keys=True, default=_jsonable)

    def rows_csv(self) -> str:
        return _to_csv([asdict(r) for r in self.rows], list(RequestRow.__dataclass_fields__))

    def timeline_csv(self) -> str:
        return _to_csv(self.timeline)

    def instance_timeline_csv(self) -> str:
        return _to_csv(self.instance_timeline)

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, default=_jsonable) + "\n" for e in self.events)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _to_csv(records: List[Dict[str, Any]], header: Optional[List[str]] = None) -> str:
    buf = io.StringIO()
    if not records and header is None:
        return ""
    header = header or list(records[0])
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for rec in records:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
    return buf.getvalue()


def _summary(values: Sequence[float], cfg: MetricsConfig, prefix: str) -> Dict[str, Optional[float]]:
    out: Dict[str, Optional[float]] = {f"{prefix}_mean": float(np.mean(values)) if len(values) else None}
    for q in cfg.percentiles:
        out[f"{prefix}_p{q:g}"] = percentile(values, q)
    out[f"{prefix}_max"] = max(values) if len(values) else None
    return out


def timeline(rows: Sequence[RequestRow], count_series, end_time: float, cfg: MetricsConfig) -> List[Dict[str, Any]]:
    """Per-interval aggregates keyed by arrival time, plus the time-averaged instance count."""
    dt = cfg.aggregation_interval
    n = max(1, int(math.ceil(end_time / dt))) if end_time > 0 else 0
    buckets: List[List[RequestRow]] = [[] for _ in range(n)]
    for r in rows:
        k = int(r.arrival_time // dt)
        if 0 <= k < n:
            buckets[k].append(r)
    out = []
    for k in range(n):
        lo, hi = k * dt, (k + 1) * dt
        sel = buckets[k]
        done = [r for r in sel if not r.aborted]
        nl = [r.normalized_latency for r in done]
        res = resource_consumption(count_series, min(hi, end_time), lo) if hi > lo else {"mean_instances": 0.0}
        span = min(hi, end_time) - lo
        out.append({
            "start": lo,
            "arrivals": len(sel),
            "completed": len(done),
            "aborted": len(sel) - len(done),
            "prompt_tokens": sum(r.prompt_tokens for r in sel),
            "response_tokens": sum(r.response_tokens for r in sel),
            "mean_ttft": float(np.mean([r.ttft for r in done])) if done else None,
            "mean_normalized_latency": float(np.mean(nl)) if nl else None,
            "p99_normalized_latency": percentile(nl, 99) if nl else None,
            "slo_attainment": slo_attainment(done),
            "mean_instances": res["instance_seconds"] / span if span > 0 else 0.0,
        })
    return out


def build_report(result, cfg: MetricsConfig = MetricsConfig(), config: Optional[Dict[str, Any]] = None) -> MetricsReport:
    """Turn a raw simulation result into a :class:`MetricsReport`."""
    slo = cfg.slo_normalized_latency
    rows = [per_request(r, slo) for r in result.requests]
    done = [r for r in rows if not r.aborted]
    nl = [r.normalized_latency for r in done]
    agg: Dict[str, Any] = {
        "requests": len(rows),
        "completed": len(done),
        "aborted": len(rows) - len(done),
        "slo": slo,
        "slo_attainment": slo_attainment(rows),
        "slo_attainment_with_aborts": slo_attainment_with_aborts(rows),
        "preemptions": sum(r.preemptions for r in rows),
        "tokens_generated": sum(r.response_tokens for r in done),
        "end_time": result.end_time,
        "max_instances_held": result.max_held,
        "instances_created": result.instances_created,
        "anticipator_early_corrections": result.anticipator_corrections["early"],
        "anticipator_late_extensions": result.anticipator_corrections["late"],
    }
    agg.update(_summary(nl, cfg, "normalized_latency"))
    agg.update(_summary([r.ttft for r in done], cfg, "ttft"))
    agg.update(_summary([r.mean_tbt for r in done], cfg, "tbt"))
    agg.update(resource_consumption(result.count_series, result.end_time))
    ov = overhead(result.routing_overheads, rows)
    timing = {
        "mean_routing_overhead": ov["mean_overhead"],
        "overhead_ratio": ov["overhead_ratio"],
        "decisions": len(result.routing_overheads),
    }
    return MetricsReport(
        rows=rows,
        aggregates=agg,
        timeline=timeline(rows, result.count_series, result.end_time, cfg),
        instance_timeline=list(result.samples),
        scaling=list(result.scaling),
        timing=timing,
        config=dict(config or {}),
        events=list(result.events),
        invariant_violations=list(result.invariant_violations),
    )
