import pytest

from lmaas_sim.loadpred import OraclePredictor
from lmaas_sim.router import (
    LeastRequestRouter,
    LoadAwareRouter,
    MinimumUseRouter,
    RoundRobinRouter,
    RouterConfig,
    baseline_route,
    is_overloaded,
    make_router,
    score,
    score_from_parts,
)
from lmaas_sim.simcore import (
    Cluster,
    CostModel,
    InstanceStatus,
    Policies,
    Request,
    RequestState,
    SimConfig,
    Simulator,
)
from lmaas_sim.trace import generate_poisson


def _cluster(n, kv=1000):
    c = Cluster(kv, map_length=256, max_instances=max(n, 1))
    for _ in range(n):
        c.add_active()
    return c


def _queued(inst, prompt, predicted, rid=0):
    r = Request(rid, 0.0, prompt, predicted, predicted_response_tokens=predicted)
    inst.enqueue(r)
    return r


def _decoding(inst, rid, prompt, predicted, generated=1):
    r = Request(rid, 0.0, prompt, predicted, predicted_response_tokens=predicted)
    r.generated_tokens, r.state = generated, RequestState.DECODING
    r.kv = prompt + generated
    inst.residents.append(r)
    inst.kv_used += r.kv
    inst.lookahead.admit(rid, prompt, predicted - generated)
    return r


def _incoming(prompt, predicted, rid=99):
    return Request(rid, 0.0, prompt, predicted, predicted_response_tokens=predicted)


def test_score_goldens():
    s = score_from_parts(100, 50, 50, 100, peak=0.5, threshold=0.8, capacity=1000)
    assert (s.prefill, s.decode, s.memory, s.total) == (150, 150, 0, 300)
    s = score_from_parts(100, 50, 50, 100, peak=0.9, threshold=0.8, capacity=1000)
    assert s.memory == pytest.approx(100) and s.total == pytest.approx(400)
    assert score_from_parts(0, 0, 50, 100, peak=0.05, threshold=0.8, capacity=1000).total == 150


def test_score_reads_instance_state():
    c = _cluster(1)
    _queued(c.instances[0], 100, 50)
    s = score(c.instances[0], 50, 100)
    assert (s.prefill, s.decode, s.memory) == (150, 150, 0.0)


def test_memory_penalty_uses_projected_peak():
    c = _cluster(1, kv=1000)
    inst = c.instances[0]
    inst.lookahead._buf[:100] = 850
    s = score(inst, 40, 10)
    # Peak of 850 + 49 projected tokens against the 800-token ideal.
    assert s.memory == pytest.approx(99)


def test_route_prefers_lower_score():
    c = _cluster(2)
    _queued(c.instances[0], 100, 50, rid=0)
    _queued(c.instances[1], 250, 150, rid=1)
    d = LoadAwareRouter().route(_incoming(50, 100), c)
    assert d.kind == "dispatch" and d.instance == 0
    assert d.scores[0].total == 300 and d.scores[1].total == 550


def test_route_tie_goes_to_lowest_id():
    c = _cluster(3)
    assert LoadAwareRouter().route(_incoming(10, 10), c).instance == 0


def _saturate(inst):
    # An idle instance is never overloaded, so give it one small resident first.
    _decoding(inst, 50 + inst.instance_id, prompt=1, predicted=2)
    inst.lookahead._buf[:] = 0.99 * inst.kv_capacity


def test_all_overloaded_enqueue_then_abort():
    c = _cluster(2)
    for inst in c.instances:
        _saturate(inst)
    r = LoadAwareRouter(RouterConfig(queue_capacity=3))
    assert r.route(_incoming(10, 10), c, queue_len=2).kind == "enqueue"
    assert r.route(_incoming(10, 10), c, queue_len=3).kind == "abort"


def test_overload_rule_counts_virtual_and_pending():
    c = _cluster(1, kv=1000)
    inst = c.instances[0]
    cfg = RouterConfig()
    _decoding(inst, 0, prompt=1, predicted=2)
    inst.lookahead._buf[:10] = 960  # exactly 10% of the horizon above 95%
    inst.lookahead._buf[10:20] = 900
    assert not is_overloaded(inst, cfg)
    assert is_overloaded(inst, cfg, (60, 20))
    _queued(inst, 60, 20, rid=1)
    assert is_overloaded(inst, cfg)


def test_only_active_instances_receive_requests():
    c = _cluster(3)
    c.instances[0].status = InstanceStatus.ISOLATED
    c.instances[1].status = InstanceStatus.BOOTING
    for name in ("load_aware", "rr", "lr", "mu"):
        assert make_router(name).route(_incoming(5, 5), c).instance == 2
    c.instances[2].status = InstanceStatus.STOPPED
    assert LoadAwareRouter().route(_incoming(5, 5), c).kind == "enqueue"
    assert RoundRobinRouter(queue_capacity=0).route(_incoming(5, 5), c).kind == "abort"


def test_round_robin_cycle():
    c = _cluster(3)
    rr = RoundRobinRouter()
    assert [rr.route(_incoming(1, 1), c).instance for _ in range(4)] == [0, 1, 2, 0]
    assert [baseline_route("rr", [0, 0, 0], k) for k in range(4)] == [0, 1, 2, 0]


def test_least_request():
    assert baseline_route("lr", [3, 1, 2]) == 1
    c = _cluster(3)
    for iid, n in enumerate((3, 1, 2)):
        for k in range(n):
            _queued(c.instances[iid], 5, 5, rid=10 * iid + k)
    assert LeastRequestRouter().route(_incoming(1, 1), c).instance == 1


def test_minimum_use():
    assert baseline_route("mu", [(0.9, 0.2), (0.4, 0.5)]) == 1
    c = _cluster(2, kv=100)
    c.instances[0].busy.value, c.instances[0].kv_used = 0.9, 20
    c.instances[1].busy.value, c.instances[1].kv_used = 0.4, 50
    mu = MinimumUseRouter()
    assert mu.usage(c.instances[0], 0.0) == pytest.approx(0.55)
    assert mu.route(_incoming(1, 1), c).instance == 1
    with pytest.raises(ValueError):
        baseline_route("xx", [1])


def test_zero_beta_reduces_to_least_outstanding_tokens():
    c = _cluster(3, kv=100_000)
    for iid, outstanding in enumerate((40, 15, 30)):
        _decoding(c.instances[iid], iid, prompt=500, predicted=outstanding + 1)
    cfg = RouterConfig(memory_penalty=0.0)
    assert LoadAwareRouter(cfg).route(_incoming(10, 10), c).instance == 1


def test_config_validation():
    with pytest.raises(ValueError):
        RouterConfig(memory_penalty=-1)
    with pytest.raises(ValueError):
        RouterConfig(ideal_memory_threshold=0)
    with pytest.raises(ValueError):
        make_router("random")


def test_queue_overflow_aborts_are_recorded():
    trace = generate_poisson(40, 20, seed=1)
    sim = Simulator(trace, Policies(LoadAwareRouter(RouterConfig(queue_capacity=4)), None, OraclePredictor()),
                    CostModel(), SimConfig(kv_capacity=800, router_queue_capacity=4, check_invariants=True))
    res = sim.run()
    reasons = {r.abort_reason for r in res.requests if r.state is RequestState.ABORTED}
    assert "router-queue-full" in reasons
    assert res.invariant_violations == []
    assert all(r.finished for r in res.requests)
