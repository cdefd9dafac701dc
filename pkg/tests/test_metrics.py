import json
import math

import pytest
from hypothesis import given, strategies as st

from lmaas_sim.metrics import (
    MetricsConfig,
    RequestRow,
    build_report,
    forecast_accuracy,
    length_accuracy,
    overhead,
    per_request,
    percentile,
    resource_consumption,
    slo_attainment,
    slo_attainment_with_aborts,
)
from lmaas_sim.simcore import Request, RequestState


def _done(arrival, first, completion, d):
    r = Request(0, arrival, 10, d, predicted_response_tokens=d)
    r.first_token_time, r.completion_time = first, completion
    r.generated_tokens, r.state = d, RequestState.COMPLETED
    return r


def _row(nl, aborted=False):
    return RequestRow(0, 0.0, 1, 1, 1, 0, aborted, normalized_latency=None if aborted else nl,
                      e2e_latency=None if aborted else nl, slo_met=None if aborted else nl <= 0.2)


def test_per_request_definitions():
    row = per_request(_done(0.0, 0.5, 10.0, 50))
    assert row.ttft == 0.5 and row.normalized_latency == pytest.approx(0.2)
    assert row.slo_met
    one = per_request(_done(2.0, 3.0, 3.0, 1))
    assert one.normalized_latency == one.e2e_latency == 1.0


def test_aborted_row():
    r = Request(0, 1.0, 10, 5)
    r.state, r.abort_reason = RequestState.ABORTED, "router-queue-full"
    row = per_request(r)
    assert row.aborted and row.ttft is None and row.normalized_latency is None
    assert row.abort_reason == "router-queue-full"


def test_slo_attainment_examples():
    rows = [_row(0.1), _row(0.3), _row(0.15)]
    assert slo_attainment(rows, 0.2) == pytest.approx(2 / 3)
    assert slo_attainment([_row(0.1), _row(0.2)], 0.2) == 1.0
    assert slo_attainment([], 0.2) is None
    assert slo_attainment([_row(0, aborted=True)]) is None


def test_attainment_with_aborts_not_higher():
    rows = [_row(0.1), _row(0.3), _row(0, aborted=True), _row(0, aborted=True)]
    assert slo_attainment(rows) == 0.5
    assert slo_attainment_with_aborts(rows) == 0.25


def test_forecast_accuracy_examples(caplog):
    assert forecast_accuracy([110], [100])["mean_ape"] == pytest.approx(0.10)
    perfect = forecast_accuracy([5, 6], [5, 6])
    assert perfect["mean_ape"] == perfect["max_ape"] == 0
    a = forecast_accuracy([90, 150], [100, 100])
    assert a["mean_ape"] == pytest.approx(0.30) and a["max_ape"] == pytest.approx(0.50)
    z = forecast_accuracy([3, 110], [0, 100])
    assert z["windows"] == 1 and "zero actual" in caplog.text


def test_length_accuracy_examples():
    acc = length_accuracy([100], [87])
    assert acc["mae"] == 13 and acc["acc25"] == 1
    assert length_accuracy([125], [100])["acc25"] == 1  # inclusive boundary
    assert length_accuracy([126], [100])["acc25"] == 0
    with pytest.raises(ValueError):
        length_accuracy([], [])
    with pytest.raises(ValueError):
        length_accuracy([1, 2], [1])


def test_resource_consumption_examples():
    assert resource_consumption([(0.0, 2)], 100.0) == {"instance_seconds": 200.0, "mean_instances": 2.0}
    assert resource_consumption([(0.0, 1), (50.0, 2)], 100.0)["instance_seconds"] == 150.0
    # Static 8 against a policy averaging 4.05 instances.
    static = resource_consumption([(0.0, 8)], 600.0)["instance_seconds"]
    policy = resource_consumption([(0.0, 4), (300.0, 4.1)], 600.0)["instance_seconds"]
    assert 1 - policy / static == pytest.approx(0.49375)


def test_overhead_examples():
    rows = [_row(1.0)]
    assert overhead([0.001, 0.003], rows)["mean_overhead"] == pytest.approx(0.002)
    long = RequestRow(0, 0.0, 1, 1, 1, 0, False, e2e_latency=19.4, normalized_latency=0.1)
    assert overhead([0.0456], [long])["overhead_ratio"] == pytest.approx(0.00235, abs=1e-5)
    assert overhead([], rows) == {"mean_overhead": None, "overhead_ratio": None}


def test_percentile_nearest_rank():
    v = [5, 1, 4, 2, 3]
    assert percentile(v, 0) == 1 and percentile(v, 100) == 5
    assert percentile(v, 50) == 3 and percentile(v, 99) == 5
    assert percentile([], 50) is None
    with pytest.raises(ValueError):
        percentile(v, 101)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50),
       st.floats(0, 100), st.floats(0, 100))
def test_percentile_monotone(values, q1, q2):
    lo, hi = sorted((q1, q2))
    assert percentile(values, lo) <= percentile(values, hi)
    assert min(values) <= percentile(values, lo) <= max(values)


def test_config_validation():
    with pytest.raises(ValueError):
        MetricsConfig(slo_normalized_latency=0)


class _Result:
    def __init__(self, requests):
        self.requests = requests
        self.count_series = [(0.0, 2, 2), (400.0, 1, 1)]
        self.end_time = 700.0
        self.max_held = 2
        self.instances_created = 2
        self.anticipator_corrections = {"early": 0, "late": 0}
        self.routing_overheads = [0.001] * len(requests)
        self.samples, self.scaling, self.events, self.invariant_violations = [], [], [], []


def test_report_timeline_consistent_with_rows():
    reqs = [_done(t, t + 0.5, t + 5.0, 25) for t in (10.0, 200.0, 320.0, 650.0)]
    aborted = Request(9, 100.0, 10, 5)
    aborted.state = RequestState.ABORTED
    rep = build_report(_Result(reqs + [aborted]), MetricsConfig(aggregation_interval=300))
    assert [b["arrivals"] for b in rep.timeline] == [3, 1, 1]
    assert sum(b["completed"] for b in rep.timeline) == rep.aggregates["completed"] == 4
    assert sum(b["aborted"] for b in rep.timeline) == rep.aggregates["aborted"] == 1
    assert sum(b["prompt_tokens"] for b in rep.timeline) == sum(r.prompt_tokens for r in rep.rows)
    assert rep.aggregates["instance_seconds"] == pytest.approx(2 * 400 + 300)
    assert rep.timeline[1]["mean_instances"] == pytest.approx((100 * 2 + 200 * 1) / 300)
    body = json.loads(rep.aggregates_json())
    assert body["aggregates"]["normalized_latency_p99"] == pytest.approx(0.2)
    assert rep.rows_csv().splitlines()[0].startswith("request_id,arrival_time")
    assert math.isclose(rep.timing["overhead_ratio"], 0.001 / 5.0)
