"""Request traces: CSV ingestion, synthetic generators and window aggregation.

A trace is a list of :class:`TraceRecord` sorted by arrival time. Two CSV
layouts are understood:

* the native layout ``arrival_time,prompt_tokens,response_tokens[,request_id]``
  (arrival in seconds from trace start);
* the Azure LLM inference trace layout ``TIMESTAMP,ContextTokens,GeneratedTokens``
  where ``TIMESTAMP`` is a wall-clock datetime. Arrival times are rebased so the
  first request arrives at 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_WINDOW = 600.0
DAY_SECONDS = 86400.0

AZURE_COLUMNS = {
    "arrival_time": "TIMESTAMP",
    "prompt_tokens": "ContextTokens",
    "response_tokens": "GeneratedTokens",
}


class TraceError(ValueError):
    """Raised for malformed trace files or invalid generator parameters."""


@dataclass(frozen=True)
class TraceRecord:
    arrival_time: float
    prompt_tokens: int
    response_tokens: int
    request_id: str = ""

    def __post_init__(self):
        if self.arrival_time < 0:
            raise TraceError(f"negative arrival time {self.arrival_time}")
        if self.prompt_tokens < 1 or self.response_tokens < 1:
            raise TraceError(
                f"token counts must be >= 1, got prompt={self.prompt_tokens} "
                f"response={self.response_tokens}"
            )


@dataclass(frozen=True)
class WindowAggregate:
    window_index: int
    prompt_total: int
    decode_total: int
    window_length: float

    @property
    def start(self) -> float:
        return self.window_index * self.window_length


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_timestamp(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        pass
    text = value.strip().replace("Z", "+00:00")
    # Azure traces carry 7 fractional digits; datetime accepts at most 6.
    if "." in text:
        head, frac = text.split(".", 1)
        digits = "".join(ch for ch in frac if ch.isdigit())
        rest = frac[len(digits):]
        text = f"{head}.{digits[:6]}{rest}"
    return datetime.fromisoformat(text).timestamp()


def load_trace(path, format: str = "csv") -> List[TraceRecord]:
    """Read a trace file and return its records sorted by arrival time.

    Raises :class:`TraceError` naming the offending line for unparseable rows
    and for rows violating the record invariants.
    """
    if format != "csv":
        raise TraceError(f"unsupported trace format {format!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []

    header = [h.strip() for h in rows[0]]
    if AZURE_COLUMNS["prompt_tokens"] in header:
        idx = [header.index(AZURE_COLUMNS[k]) for k in ("arrival_time", "prompt_tokens", "response_tokens")]
        id_col = None
    elif "arrival_time" in header:
        idx = [header.index(k) for k in ("arrival_time", "prompt_tokens", "response_tokens")]
        id_col = header.index("request_id") if "request_id" in header else None
    else:
        raise TraceError(f"{path}:1: unrecognised header {header}")

    parsed: List[Tuple[float, int, int, str]] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            t = _parse_timestamp(row[idx[0]])
            p = int(float(row[idx[1]]))
            d = int(float(row[idx[2]]))
            rid = row[id_col].strip() if id_col is not None and id_col < len(row) else ""
        except (ValueError, IndexError) as exc:
            raise TraceError(f"{path}:{lineno}: cannot parse row {row!r} ({exc})") from None
        if p < 0 or d < 0:
            raise TraceError(f"{path}:{lineno}: negative token count in row {row!r}")
        parsed.append((t, p, d, rid))

    if parsed and AZURE_COLUMNS["prompt_tokens"] in header:
        t0 = min(r[0] for r in parsed)
        parsed = [(t - t0, p, d, rid) for t, p, d, rid in parsed]

    records = []
    for n, (t, p, d, rid) in enumerate(parsed):
        try:
            # Azure rows with zero generated tokens exist; a request always yields >= 1.
            records.append(TraceRecord(t, max(p, 1), max(d, 1), rid or f"r{n}"))
        except TraceError as exc:
            raise TraceError(f"{path}: record {n}: {exc}") from None
    records.sort(key=lambda r: r.arrival_time)
    return records


def save_trace(records: Iterable[TraceRecord], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arrival_time", "prompt_tokens", "response_tokens", "request_id"])
        for r in records:
            w.writerow([repr(float(r.arrival_time)), r.prompt_tokens, r.response_tokens, r.request_id])


# ---------------------------------------------------------------------------
# Length samplers

LengthSampler = Callable[[np.random.Generator, int], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LogNormalLengths:
    """Long-tailed (prompt, response) lengths; medians default to 52 / 87 tokens."""

    prompt_median: float = 52.0
    response_median: float = 87.0
    prompt_sigma: float = 0.9
    response_sigma: float = 0.8
    max_prompt: int = 1024
    max_response: int = 1024

    def __call__(self, rng: np.random.Generator, n: int):
        p = rng.lognormal(math.log(self.prompt_median), self.prompt_sigma, n)
        d = rng.lognormal(math.log(self.response_median), self.response_sigma, n)
        p = np.clip(np.rint(p), 1, self.max_prompt).astype(np.int64)
        d = np.clip(np.rint(d), 1, self.max_response).astype(np.int64)
        return p, d

    def mean_tokens(self) -> Tuple[float, float]:
        """Approximate means (ignoring clipping) of prompt and response lengths."""
        return (
            self.prompt_median * math.exp(self.prompt_sigma ** 2 / 2),
            self.response_median * math.exp(self.response_sigma ** 2 / 2),
        )


class EmpiricalLengths:
    """Resample (prompt, response) pairs from an existing trace."""

    def __init__(self, records: Sequence[TraceRecord]):
        if not records:
            raise TraceError("empirical sampler needs a non-empty trace")
        self.prompts = np.array([r.prompt_tokens for r in records], dtype=np.int64)
        self.responses = np.array([r.response_tokens for r in records], dtype=np.int64)

    def __call__(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self.prompts), n)
        return self.prompts[idx], self.responses[idx]

    def mean_tokens(self) -> Tuple[float, float]:
        return float(self.prompts.mean()), float(self.responses.mean())


def _records(times, prompts, responses, prefix="r") -> List[TraceRecord]:
    return [
        TraceRecord(float(t), int(p), int(d), f"{prefix}{i}")
        for i, (t, p, d) in enumerate(zip(times, prompts, responses))
    ]


# ---------------------------------------------------------------------------
# Generators


def generate_poisson(
    qps: float,
    duration: float,
    length_source: Optional[LengthSampler] = None,
    seed: int = 0,
    start: float = 0.0,
) -> List[TraceRecord]:
    """Homogeneous Poisson arrivals at ``qps`` over ``[start, start + duration)``."""
    if qps <= 0:
        raise TraceError(f"qps must be positive, got {qps}")
    if duration < 0:
        raise TraceError(f"duration must be non-negative, got {duration}")
    if duration == 0:
        return []
    length_source = length_source or LogNormalLengths()
    rng = np.random.default_rng(seed)
    # Draw gaps in blocks until the horizon is passed.
    gaps = []
    total = 0.0
    block = max(16, int(qps * duration * 1.1) + 16)
    while total < duration:
        g = rng.exponential(1.0 / qps, block)
        gaps.append(g)
        total += float(g.sum())
    times = np.cumsum(np.concatenate(gaps))
    times = times[times < duration] + start
    p, d = length_source(rng, len(times))
    return _records(times, p, d)


def _profile_curve(day_profile: np.ndarray, frac_of_day: np.ndarray) -> np.ndarray:
    """Periodic linear interpolation of hourly multipliers at fractional day positions.

    Multiplier ``h`` is the rate at the centre of hour ``h``.
    """
    n = len(day_profile)
    pos = frac_of_day * n - 0.5
    lo = np.floor(pos).astype(int) % n
    hi = (lo + 1) % n
    w = pos - np.floor(pos)
    return day_profile[lo] * (1 - w) + day_profile[hi] * w


def periodic_rate(
    day_profile: Sequence[float],
    base_tps: float,
    days: int,
    peak_jitter: float = 0.0,
    seed: int = 0,
    noise: float = 0.0,
    day_length: float = DAY_SECONDS,
    window: float = DEFAULT_WINDOW,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-window token rate (tokens/s) of a jittered daily pattern.

    Returns ``(window_starts, tps)``. Each day's profile excess over its trough
    is scaled so that the day's peak is multiplied by a factor drawn uniformly
    from ``[1 - peak_jitter, 1 + peak_jitter]``; troughs are unaffected.
    ``noise`` is the standard deviation of an extra per-window multiplicative
    factor ``(1 + noise * N(0, 1))`` clipped at 0.05.
    """
    prof = np.asarray(day_profile, dtype=float)
    if prof.ndim != 1 or len(prof) == 0 or np.any(prof <= 0):
        raise TraceError("day_profile must be a non-empty sequence of positive multipliers")
    if not 0 <= peak_jitter < 1:
        raise TraceError(f"peak_jitter must lie in [0, 1), got {peak_jitter}")
    if base_tps <= 0 or days < 0 or window <= 0 or day_length <= 0:
        raise TraceError("base_tps, window and day_length must be positive and days >= 0")
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1 - peak_jitter, 1 + peak_jitter, days) if peak_jitter > 0 else np.ones(days)

    n_windows = int(round(days * day_length / window))
    starts = np.arange(n_windows) * window
    mids = starts + window / 2
    shape = _profile_curve(prof, (mids % day_length) / day_length)
    lo, hi = prof.min(), prof.max()
    weight = (shape - lo) / (hi - lo) if hi > lo else np.zeros_like(shape)
    day_idx = np.minimum((mids // day_length).astype(int), max(days - 1, 0))
    shape = shape * (1 + (factors[day_idx] - 1) * weight) if days else shape
    if noise > 0:
        shape = shape * np.clip(1 + noise * rng.standard_normal(n_windows), 0.05, None)
    return starts, base_tps * shape


def generate_periodic(
    day_profile: Sequence[float],
    base_tps: float,
    days: int,
    peak_jitter: float = 0.0,
    seed: int = 0,
    *,
    noise: float = 0.0,
    day_length: float = DAY_SECONDS,
    window: float = DEFAULT_WINDOW,
    length_source: Optional[LengthSampler] = None,
    spikes: Sequence[Tuple[float, float, float]] = (),
) -> List[TraceRecord]:
    """Synthetic multi-day trace whose windowed TPS follows ``day_profile * base_tps``.

    Arrivals within each window are Poisson with request rate
    ``tps / (mean prompt + mean response)``. ``spikes`` is a list of
    ``(start, end, multiplier)`` applied on top of the periodic rate; they are
    invisible to anything that only sees the periodic pattern.
    """
    length_source = length_source or LogNormalLengths()
    starts, tps = periodic_rate(day_profile, base_tps, days, peak_jitter, seed, noise, day_length, window)
    tps = tps.copy()
    for s, e, mult in spikes:
        tps[(starts + window > s) & (starts < e)] *= mult
    mp, md = length_source.mean_tokens()
    qps = tps / (mp + md)

    rng = np.random.default_rng([seed, 1])
    counts = rng.poisson(qps * window)
    times = np.concatenate(
        [np.sort(rng.uniform(s, s + window, c)) for s, c in zip(starts, counts)]
    ) if len(counts) else np.empty(0)
    p, d = length_source(rng, len(times))
    return _records(times, p, d)


# ---------------------------------------------------------------------------
# Aggregation


def aggregate_windows(
    trace: Sequence[TraceRecord],
    window_length: float = DEFAULT_WINDOW,
    n_windows: Optional[int] = None,
) -> List[WindowAggregate]:
    """Token totals per half-open window ``[i*w, (i+1)*w)``.

    Empty windows inside the trace span are emitted with zero totals so the
    output is a contiguous series; ``n_windows`` pads or truncates it.
    """
    if window_length <= 0:
        raise TraceError(f"window_length must be positive, got {window_length}")
    if not trace and not n_windows:
        return []
    t = np.array([r.arrival_time for r in trace], dtype=float)
    p = np.array([r.prompt_tokens for r in trace], dtype=np.int64)
    d = np.array([r.response_tokens for r in trace], dtype=np.int64)
    idx = np.floor(t / window_length).astype(np.int64)
    n = n_windows if n_windows is not None else (int(idx.max()) + 1 if len(idx) else 0)
    keep = idx < n
    ptot = np.bincount(idx[keep], weights=p[keep], minlength=n)[:n]
    dtot = np.bincount(idx[keep], weights=d[keep], minlength=n)[:n]
    return [
        WindowAggregate(i, int(round(ptot[i])), int(round(dtot[i])), window_length)
        for i in range(n)
    ]
