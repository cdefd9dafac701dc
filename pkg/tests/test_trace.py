import numpy as np
import pytest

from lmaas_sim.trace import (
    LogNormalLengths,
    TraceError,
    TraceRecord,
    aggregate_windows,
    generate_periodic,
    generate_poisson,
    load_trace,
    periodic_rate,
    save_trace,
)


def _write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_sorts_by_arrival(tmp_path):
    p = _write(tmp_path, "arrival_time,prompt_tokens,response_tokens\n0.0,10,5\n1.0,20,8\n0.5,7,9\n")
    recs = load_trace(p)
    assert [r.arrival_time for r in recs] == [0.0, 0.5, 1.0]
    assert [r.prompt_tokens for r in recs] == [10, 7, 20]


def test_header_only_is_empty(tmp_path):
    p = _write(tmp_path, "arrival_time,prompt_tokens,response_tokens\n")
    assert load_trace(p) == []


def test_negative_tokens_rejected_with_line(tmp_path):
    p = _write(tmp_path, "arrival_time,prompt_tokens,response_tokens\n0.0,4,4\n1.0,-3,5\n")
    with pytest.raises(TraceError, match=":3:"):
        load_trace(p)


def test_unparseable_row(tmp_path):
    p = _write(tmp_path, "arrival_time,prompt_tokens,response_tokens\nabc,1,1\n")
    with pytest.raises(TraceError):
        load_trace(p)


def test_azure_layout_rebased(tmp_path):
    p = _write(tmp_path, "TIMESTAMP,ContextTokens,GeneratedTokens\n"
                         "2023-11-16 18:15:46.6805900,374,44\n"
                         "2023-11-16 18:15:50.9951690,396,109\n")
    recs = load_trace(p)
    assert recs[0].arrival_time == 0.0
    assert recs[1].arrival_time == pytest.approx(4.3146, abs=1e-3)
    assert recs[1].response_tokens == 109


def test_save_load_roundtrip(tmp_path):
    recs = generate_poisson(5, 20, seed=4)
    save_trace(recs, tmp_path / "x.csv")
    assert load_trace(tmp_path / "x.csv") == recs


def test_record_invariants():
    with pytest.raises(TraceError):
        TraceRecord(-1.0, 1, 1)
    with pytest.raises(TraceError):
        TraceRecord(0.0, 0, 1)


def test_poisson_count_statistics():
    counts = np.array([len(generate_poisson(10, 600, seed=s)) for s in range(30)])
    sigma = np.sqrt(6000)
    assert np.all(np.abs(counts - 6000) < 3 * sigma + 1)
    # The mean of 30 draws has standard error sigma / sqrt(30).
    assert abs(counts.mean() - 6000) < 3 * sigma / np.sqrt(30)


def test_poisson_deterministic_and_sorted():
    a = generate_poisson(10, 600, seed=42)
    b = generate_poisson(10, 600, seed=42)
    assert a == b
    t = [r.arrival_time for r in a]
    assert t == sorted(t) and t[-1] < 600


def test_poisson_edge_cases():
    assert generate_poisson(10, 0, seed=1) == []
    with pytest.raises(TraceError):
        generate_poisson(0, 10)


def test_lengths_clipped():
    p, d = LogNormalLengths(max_prompt=64, max_response=64)(np.random.default_rng(0), 5000)
    assert p.min() >= 1 and d.min() >= 1 and p.max() <= 64 and d.max() <= 64


def test_flat_profile_constant_rate():
    _, tps = periodic_rate([1.0] * 24, 1000.0, days=2, window=600)
    assert np.allclose(tps, 1000.0)
    trace = generate_periodic([1.0] * 24, 1000.0, days=1, seed=2, window=3600)
    w = aggregate_windows(trace, 3600, n_windows=24)
    totals = np.array([x.prompt_total + x.decode_total for x in w]) / 3600
    # Sampling noise only: ~26 requests/s, each of ~150 tokens.
    assert abs(totals.mean() - 1000) < 60
    assert totals.std() / totals.mean() < 0.1


def test_peak_to_mean_ratio_preserved():
    # Hourly profile with a single sharp peak 3.3x above its mean.
    prof = np.full(24, 0.6)
    prof[14] = 0.0
    prof[14] = 3.3 * prof.sum() / (24 - 3.3)
    assert prof.max() / prof.mean() == pytest.approx(3.3)
    trace = generate_periodic(prof, 300.0, days=7, seed=5, window=3600)
    w = aggregate_windows(trace, 3600, n_windows=7 * 24)
    tot = np.array([x.prompt_total + x.decode_total for x in w], dtype=float)
    ratio = tot.reshape(7, 24).mean(axis=0).max() / tot.mean()
    assert 2.9 <= ratio <= 3.7


def test_peak_jitter_bounds():
    prof = 0.6 - 0.35 * np.cos(2 * np.pi * np.arange(24) / 24)
    _, tps = periodic_rate(prof, 1000.0, days=10, peak_jitter=0.35, seed=9, window=3600)
    peaks = tps.reshape(10, 24).max(axis=1)
    r = peaks.max() / peaks.min()
    assert 1 <= r <= 1.35 / 0.65


def test_spike_multiplies_rate():
    base = generate_periodic([1.0] * 24, 500.0, 1, seed=1, window=600)
    spiked = generate_periodic([1.0] * 24, 500.0, 1, seed=1, window=600, spikes=[(3600, 4200, 3.0)])
    wb = aggregate_windows(base, 600, n_windows=144)
    ws = aggregate_windows(spiked, 600, n_windows=144)
    assert ws[6].prompt_total > 2 * wb[6].prompt_total


def test_aggregate_examples():
    recs = [TraceRecord(0.0, 10, 5), TraceRecord(650.0, 20, 8)]
    w = aggregate_windows(recs, 600)
    assert [(x.prompt_total, x.decode_total) for x in w] == [(10, 5), (20, 8)]
    one = aggregate_windows([TraceRecord(1.0, 3, 4), TraceRecord(2.0, 5, 6)], 600)
    assert len(one) == 1 and (one[0].prompt_total, one[0].decode_total) == (8, 10)
    edge = aggregate_windows([TraceRecord(600.0, 1, 1)], 600)
    assert edge[0].prompt_total == 0 and edge[1].prompt_total == 1


def test_aggregate_conserves_tokens():
    recs = generate_poisson(3, 2000, seed=8)
    w = aggregate_windows(recs, 600)
    assert sum(x.prompt_total for x in w) == sum(r.prompt_tokens for r in recs)
    assert sum(x.decode_total for x in w) == sum(r.response_tokens for r in recs)
    assert aggregate_windows(recs, 600, n_windows=10)[-1].prompt_total == 0
