import logging

import numpy as np
import pytest

from lmaas_sim.anticipator import LookAheadMap, recompute

from oracles import random_schedule


def _u(m, n):
    return m.usage(n).round(12).tolist()


def test_admit_example():
    m = LookAheadMap(100, 16)
    m.admit("a", 10, 5)
    assert _u(m, 7) == [0.10, 0.11, 0.12, 0.13, 0.14, 0.0, 0.0]
    m.admit("b", 10, 5)
    assert _u(m, 6) == [0.20, 0.22, 0.24, 0.26, 0.28, 0.0]


def test_admit_rejects_zero_length_and_duplicates():
    m = LookAheadMap(100, 16)
    with pytest.raises(ValueError):
        m.admit("a", 10, 0)
    m.admit("a", 10, 2)
    with pytest.raises(KeyError):
        m.admit("a", 10, 2)


def test_admit_clamps_to_map_length(caplog):
    m = LookAheadMap(100, 8)
    with caplog.at_level(logging.WARNING):
        m.admit("a", 1, 50)
    assert m.ledger["a"].predicted == 8
    assert "clamped" in caplog.text


def test_correct_early_example():
    m = LookAheadMap(100, 16)
    m.admit("a", 10, 5)
    assert m.correct_early("a", 3)
    assert _u(m, 6) == [0.10, 0.11, 0.12, 0.0, 0.0, 0.0]
    assert m.early_corrections == 1


def test_correct_at_prediction_is_noop():
    m = LookAheadMap(100, 16)
    m.admit("a", 10, 5)
    before = _u(m, 8)
    assert not m.correct_early("a", 5)
    assert _u(m, 8) == before and m.early_corrections == 0


def test_correction_leaves_other_request():
    m = LookAheadMap(100, 16)
    m.admit("a", 10, 5)
    m.admit("b", 20, 3)
    m.correct_early("b", 1)
    assert _u(m, 6) == [0.30, 0.11, 0.12, 0.13, 0.14, 0.0]


def test_extension_rule():
    m = LookAheadMap(10_000, 512)
    m.admit("a", 7, 100)
    m.advance(100)
    # Exhausted at iteration 100: 20 more iterations at P + 100 + j.
    assert m.ledger["a"].predicted == 120
    assert m.late_extensions == 1
    expected = [(7 + 100 + j) / 10_000 for j in range(20)]
    assert m.usage(21).tolist() == pytest.approx(expected + [0.0])
    m.advance(20)
    assert m.ledger["a"].predicted == 144  # +24 = 0.2 * 120


def test_extension_overshoot_subtracted():
    m = LookAheadMap(10_000, 512)
    m.admit("a", 7, 100)
    m.advance(105)
    assert m.correct_early("a", 105)
    assert not m.usage().any()


def test_advance_examples():
    m = LookAheadMap(10, 3)
    m.admit("a", 1, 3)
    assert _u(m, 3) == [0.1, 0.2, 0.3]
    m.advance(1)
    assert _u(m, 3) == [0.2, 0.3, 0.0]
    with pytest.raises(ValueError):
        m.advance(0)


def test_advance_full_length_reprojects_live_requests():
    m = LookAheadMap(100, 8)
    m.admit("done", 5, 3)
    m.admit("live", 5, 4)
    m.correct_early("done", 3)
    m.advance(8)
    assert list(m.ledger) == ["live"]
    assert m.ledger["live"].end > m.origin
    assert np.allclose(m.usage(), recompute(m.ledger, m.origin, m.length, m.capacity))


def test_peek_peak_examples():
    m = LookAheadMap(100, 128)
    assert m.peek_peak(100, (10, 5)) == pytest.approx(0.14)
    assert not m.usage().any()  # query has no side effects
    # Arbitrary map contents for the pure max query.
    m._buf[:3] = [50, 90, 40]
    assert m.peek_peak(3) == pytest.approx(0.9)
    assert m.peek_peak(100, (95, 20)) > 1.0


def test_peek_with_virtual_is_monotone():
    rng = np.random.default_rng(0)
    m = LookAheadMap(300, 64)
    for i in range(10):
        m.admit(i, int(rng.integers(1, 50)), int(rng.integers(1, 60)))
        m.advance(int(rng.integers(1, 4)))
        v = (int(rng.integers(1, 50)), int(rng.integers(1, 60)))
        assert m.peek_peak(40, v) >= m.peek_peak(40)


def test_overload_fraction_examples():
    m = LookAheadMap(100, 256)
    m.admit("a", 95, 13)  # 96 ... 107 over the next 12 iterations
    assert m.overload_fraction(100, 0.95) == pytest.approx(0.12)
    m2 = LookAheadMap(100, 256)
    m2.admit("a", 95, 11)
    assert m2.overload_fraction(100, 0.95) == pytest.approx(0.10)
    assert LookAheadMap(100, 256).overload_fraction(100, 0.95) == 0.0


def test_admit_then_correct_restores_map():
    m = LookAheadMap(200, 32)
    m.admit("x", 30, 10)
    m.advance(3)
    before = m.usage().copy()
    m.admit("y", 12, 9)
    m.correct_early("y", 0)
    assert np.array_equal(m.usage(), before)


def test_evict_removes_everything():
    m = LookAheadMap(200, 32)
    m.admit("x", 30, 10)
    m.advance(2)
    m.evict("x")
    assert not m.usage().any() and not m.ledger


def test_idle_time_advancement():
    m = LookAheadMap(100, 64)
    m.admit("x", 10, 20)
    assert m.advance_time(1.0, 0.1) == 10
    assert m.origin == 10
    assert m.advance_time(1.0, 0.0) == 0


def test_matches_brute_force_over_random_schedules():
    rng = np.random.default_rng(1234)
    worst = max(random_schedule(rng) for _ in range(300))
    assert worst < 1e-9
