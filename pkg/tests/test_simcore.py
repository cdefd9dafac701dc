import pytest
from hypothesis import given, settings, strategies as st

from lmaas_sim.loadpred import NoiseParams, NoisyPredictor, make_predictor
from lmaas_sim.metrics import build_report
from lmaas_sim.router import make_router
from lmaas_sim.simcore import (
    Cluster,
    CostModel,
    EventKind,
    EventQueue,
    Instance,
    InstanceStatus,
    Policies,
    Request,
    RequestState,
    ScaleAction,
    ScaleDenied,
    SimConfig,
    SimulationError,
    Simulator,
    step_iteration,
)
from lmaas_sim.trace import TraceRecord, generate_poisson

COST = CostModel()


def _resident(inst, rid, prompt, generated, total=1000):
    r = Request(rid, 0.0, prompt, total, predicted_response_tokens=total)
    r.generated_tokens = generated
    r.state = RequestState.DECODING
    r.kv = prompt + generated
    r.instance = inst.instance_id
    inst.residents.append(r)
    inst.kv_used += r.kv
    inst.lookahead.admit(rid, prompt, total - generated)
    return r


def _run(trace, router="load_aware", scaler=None, **cfg):
    cfg.setdefault("check_invariants", True)
    sim = Simulator(trace, Policies(make_router(router), scaler, make_predictor("oracle")), COST, SimConfig(**cfg))
    return sim, sim.run()


# -- cost model and single iterations -------------------------------------------------


def test_iteration_cost_example():
    cm = CostModel(base_iteration_latency=0.005, per_prefill_token_latency=0.00005, per_decode_token_latency=0.0002)
    assert cm.iteration_latency(100, 8) == pytest.approx(0.0116)


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(cold_start_time=0)
    with pytest.raises(ValueError):
        CostModel(per_decode_token_latency=-1)


def test_prefill_then_first_token():
    inst = Instance(0, 1000)
    r = Request(0, 0.0, 10, 5, predicted_response_tokens=5)
    inst.enqueue(r)
    elapsed, ev = step_iteration(inst, COST)
    assert elapsed == pytest.approx(COST.iteration_latency(10, 0))
    assert inst.kv_used == 11
    assert r.state is RequestState.DECODING and r.generated_tokens == 1
    assert ev.first_tokens == [r]
    # The map now projects the 11 resident tokens growing by one per remaining iteration.
    assert inst.lookahead.usage(5).tolist() == pytest.approx([0.011, 0.012, 0.013, 0.014, 0.0])


def test_completion_frees_whole_footprint():
    inst = Instance(0, 1000)
    r = _resident(inst, 0, prompt=30, generated=19, total=20)
    assert inst.kv_used == 49
    _, ev = step_iteration(inst, COST)
    assert ev.completed == [r] and r.state is RequestState.COMPLETED
    assert inst.kv_used == 0 and not inst.residents
    assert len(inst.lookahead) == 0


def test_chunked_prefill_spans_iterations():
    cm = CostModel(max_prefill_chunk=100)
    inst = Instance(0, 2000)
    r = Request(0, 0.0, 250, 3, predicted_response_tokens=3)
    inst.enqueue(r)
    chunks = []
    for _ in range(3):
        elapsed, _ = step_iteration(inst, cm)
        chunks.append(round(elapsed, 9))
    assert chunks == [round(cm.iteration_latency(n, 0), 9) for n in (100, 100, 50)]
    assert r.generated_tokens == 1 and inst.kv_used == 251


# -- preemption ------------------------------------------------------------------------


def test_preempt_latest_admitted():
    inst = Instance(0, 100)
    a = _resident(inst, 0, 40, 30)
    b = _resident(inst, 1, 20, 9)
    assert inst.kv_used == 99
    pre, ab = inst.preempt_if_needed()
    assert pre == [b] and ab == []
    assert a in inst.residents and inst.kv_used == 70
    assert inst.queue[0] is b and b.state is RequestState.PREEMPTED and b.preemptions == 1
    assert b.prefill_target == 29
    assert 1 not in inst.lookahead.ledger


def test_no_preemption_with_room():
    inst = Instance(0, 100)
    _resident(inst, 0, 30, 10)
    _resident(inst, 1, 5, 5)
    assert inst.kv_used == 50
    assert inst.preempt_if_needed() == ([], [])


def test_oversize_request_aborted():
    inst = Instance(0, 100)
    r = Request(0, 0.0, 150, 5)
    inst.enqueue(r)
    _, ev = step_iteration(inst, COST)
    assert ev.aborted == [r] and r.abort_reason == "oversize"
    assert inst.kv_used == 0


def test_lone_resident_outgrowing_cache_aborted():
    inst = Instance(0, 100)
    r = _resident(inst, 0, 60, 40)
    pre, ab = inst.preempt_if_needed()
    assert pre == [] and ab == [r] and inst.kv_used == 0


def test_preempted_request_recomputes_and_finishes():
    trace = [TraceRecord(0.0, 40, 60, "a"), TraceRecord(0.0, 30, 60, "b")]
    _, res = _run(trace, kv_capacity=160, max_instances=1)
    assert not res.invariant_violations
    assert all(r.state is RequestState.COMPLETED for r in res.requests)
    assert sum(r.preemptions for r in res.requests) >= 1
    assert all(r.generated_tokens == r.true_response_tokens for r in res.requests)


# -- cluster mechanics -------------------------------------------------------------------


def test_boot_timing():
    c = Cluster(1000)
    iid = c.boot_instance(CostModel(cold_start_time=30), now=100.0)
    assert c.instances[iid].boot_done_at == 130.0
    assert c.instances[iid].status is InstanceStatus.BOOTING
    assert not c.instances[iid].routable


def test_two_boots_distinct():
    c = Cluster(1000)
    ids = {c.boot_instance(COST, 0.0), c.boot_instance(COST, 0.0)}
    assert len(ids) == 2 and c.current_count() == 2


def test_boot_denied_at_max():
    c = Cluster(1000, max_instances=8)
    for _ in range(8):
        c.add_active()
    with pytest.raises(ScaleDenied):
        c.boot_instance(COST, 0.0)


def test_event_queue_order_and_past_events():
    q = EventQueue()
    q.push(1.0, EventKind.ARRIVAL, "a")
    q.push(1.0, EventKind.ITERATION_DONE, "i")
    q.push(0.5, EventKind.TICK, "t")
    assert [q.pop()[2] for _ in range(3)] == ["t", "i", "a"]
    with pytest.raises(SimulationError):
        q.push(0.1, EventKind.TICK)


class _ScriptedScaler:
    """Emits fixed actions at given tick times."""

    def __init__(self, script):
        self.script = dict(script)

    def on_tick(self, cluster, now):
        return self.script.pop(now, [])


def test_boot_becomes_active_after_cold_start():
    trace = generate_poisson(1, 200, seed=1)
    sim, res = _run(trace, scaler=_ScriptedScaler({100.0: [ScaleAction("boot", 1, "test")]}),
                    event_log=True, max_instances=2)
    active = [e for e in res.events if e["event"] == "active"]
    assert active == [{"time": 130.0, "event": "active", "instance": 1}]
    assert not res.invariant_violations


def test_boot_denied_is_recorded():
    trace = generate_poisson(1, 50, seed=1)
    _, res = _run(trace, scaler=_ScriptedScaler({10.0: [ScaleAction("boot", 1, "test")]}), max_instances=1)
    assert res.scaling == [{"time": 10.0, "reason": "test", "delta": 0, "denied": True}]
    assert res.max_held == 1


def test_isolated_instance_drains_and_gets_no_new_work():
    trace = generate_poisson(4, 120, seed=3)
    sim, res = _run(trace, router="rr", initial_instances=2, min_instances=1, max_instances=2,
                    scaler=_ScriptedScaler({10.0: [ScaleAction("isolate", 1, "test")]}), event_log=True)
    assert not res.invariant_violations
    isolated = next(e["instance"] for e in res.events if e["event"] == "isolate")
    late = [r for r in res.requests if r.dispatch_time is not None and r.dispatch_time > 10.0]
    assert late and all(r.instance != isolated for r in late)
    assert all(r.state is RequestState.COMPLETED for r in res.requests)
    assert sim.cluster.instances[isolated].status is InstanceStatus.STOPPED


# -- whole runs ----------------------------------------------------------------------------


def test_empty_trace():
    _, res = _run([])
    rep = build_report(res)
    assert rep.aggregates["requests"] == 0
    assert rep.aggregates["instance_seconds"] == 0.0
    assert rep.aggregates["slo_attainment"] is None


def test_single_request_latency():
    _, res = _run([TraceRecord(0.0, 52, 87)])
    r = res.requests[0]
    ttft = COST.iteration_latency(52, 0)
    assert r.first_token_time - r.arrival_time == pytest.approx(ttft)
    e2e = ttft + 86 * COST.iteration_latency(0, 1)
    assert r.completion_time == pytest.approx(e2e)
    row = build_report(res).rows[0]
    assert row.normalized_latency == pytest.approx(e2e / 87)


def test_identical_runs_identical_reports():
    trace = generate_poisson(6, 120, seed=5)
    reps = []
    for _ in range(2):
        pred = NoisyPredictor(NoiseParams(0.55, 260.0), seed=2)
        sim = Simulator(trace, Policies(make_router("load_aware"), None, pred), COST,
                        SimConfig(initial_instances=2, max_instances=2))
        reps.append(build_report(sim.run()))
    assert reps[0].aggregates_json() == reps[1].aggregates_json()
    assert reps[0].rows_csv() == reps[1].rows_csv()


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(0, 40),
    kv=st.integers(200, 1500),
    instances=st.integers(1, 3),
    router=st.sampled_from(["load_aware", "rr", "lr", "mu"]),
    seed=st.integers(0, 10_000),
)
def test_conservation_invariants(n, kv, instances, router, seed):
    import numpy as np

    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0, 20, n))
    trace = [TraceRecord(float(t), int(rng.integers(1, 300)), int(rng.integers(1, 200)), f"q{i}")
             for i, t in enumerate(times)]
    sim = Simulator(trace, Policies(make_router(router), None, make_predictor("heuristic")), COST,
                    SimConfig(kv_capacity=kv, initial_instances=instances, min_instances=instances,
                              max_instances=instances, router_queue_capacity=5, check_invariants=True))
    res = sim.run()
    assert res.invariant_violations == []
    done = [r for r in res.requests if r.state is RequestState.COMPLETED]
    aborted = [r for r in res.requests if r.state is RequestState.ABORTED]
    assert len(done) + len(aborted) == n
    for r in done:
        assert r.generated_tokens == r.true_response_tokens
        assert r.arrival_time <= r.first_token_time <= r.completion_time
    assert sum(i.tokens_generated for i in sim.cluster.instances) == sum(r.generated_tokens for r in res.requests)
    assert all(i.kv_used == 0 for i in sim.cluster.instances)
