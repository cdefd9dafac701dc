"""Discrete-event simulation of LLM instances under continuous batching.

Each instance runs iterations back to back while it has work. One iteration
prefills up to ``max_prefill_chunk`` prompt tokens (FCFS from the instance
queue) and advances every decoding request by one token. Its latency is
``c0 + c_p * prefill_tokens + c_d * decoders``.

KV accounting: a request admitted to prefill immediately holds ``P + g`` KV
tokens (``g`` = tokens generated so far, non-zero only after a preemption) and
grows by one token per emitted token, so a resident always holds
``P + generated_tokens``. When the next step would overflow the capacity the
latest-admitted residents are evicted; they go back to the front of the queue
and must re-prefill ``P + g`` tokens.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple

from .anticipator import LookAheadMap

logger = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


class ScaleDenied(SimulationError):
    """Raised when a boot is requested at the hard instance maximum."""


@dataclass(frozen=True)
class CostModel:
    """Linear iteration latency model plus instance cold-start time.

    The defaults give a lone request (52 prompt / 87 response tokens) a
    normalized latency of about 0.0667 s/token, a third of a 0.2 s SLO.
    """

    base_iteration_latency: float = 0.0655
    per_prefill_token_latency: float = 0.0002
    per_decode_token_latency: float = 0.001
    max_prefill_chunk: int = 512
    cold_start_time: float = 30.0

    def __post_init__(self):
        if min(self.base_iteration_latency, self.per_prefill_token_latency, self.per_decode_token_latency) < 0:
            raise ValueError("cost coefficients must be non-negative")
        if self.cold_start_time <= 0:
            raise ValueError("cold_start_time must be positive")
        if self.max_prefill_chunk < 1:
            raise ValueError("max_prefill_chunk must be >= 1")

    def iteration_latency(self, prefill_tokens: int, decoders: int) -> float:
        return (
            self.base_iteration_latency
            + self.per_prefill_token_latency * prefill_tokens
            + self.per_decode_token_latency * decoders
        )


class RequestState(Enum):
    QUEUED_ROUTER = "queued-at-router"
    QUEUED_INSTANCE = "queued-at-instance"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    PREEMPTED = "preempted"
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass(eq=False)
class Request:
    id: int
    arrival_time: float
    prompt_tokens: int
    true_response_tokens: int
    predicted_response_tokens: int = 0
    name: str = ""
    generated_tokens: int = 0
    state: RequestState = RequestState.QUEUED_ROUTER
    instance: Optional[int] = None
    dispatch_time: Optional[float] = None
    first_token_time: Optional[float] = None
    completion_time: Optional[float] = None
    last_token_time: Optional[float] = None
    max_tbt: float = 0.0
    preemptions: int = 0
    abort_reason: str = ""
    # residency bookkeeping
    kv: int = 0
    prefilled: int = 0
    admit_seq: int = -1
    map_offset: int = 0
    route_overhead: float = 0.0

    @property
    def prefill_target(self) -> int:
        return self.prompt_tokens + self.generated_tokens

    @property
    def finished(self) -> bool:
        return self.state in (RequestState.COMPLETED, RequestState.ABORTED)

    @property
    def predicted_remaining(self) -> int:
        return max(0, self.predicted_response_tokens - self.generated_tokens)

    def emit_token(self, now: float) -> None:
        self.generated_tokens += 1
        if self.first_token_time is None:
            self.first_token_time = now
        else:
            self.max_tbt = max(self.max_tbt, now - self.last_token_time)
        self.last_token_time = now


class InstanceStatus(Enum):
    BOOTING = "booting"
    ACTIVE = "active"
    ISOLATED = "isolated"
    STOPPED = "stopped"


@dataclass
class IterationPlan:
    start: float
    elapsed: float
    decoders: List[Request]
    prefill: List[Tuple[Request, int]]

    @property
    def prefill_tokens(self) -> int:
        return sum(n for _, n in self.prefill)


@dataclass
class TokenEvents:
    """What one iteration produced."""

    elapsed: float
    tokens: int = 0
    first_tokens: List[Request] = field(default_factory=list)
    completed: List[Request] = field(default_factory=list)
    preempted: List[Request] = field(default_factory=list)
    aborted: List[Request] = field(default_factory=list)


class BusyMeter:
    """Exponentially weighted busy fraction with time constant ``tau`` seconds."""

    def __init__(self, tau: float = 5.0):
        self.tau = tau
        self.value = 0.0
        self.t = 0.0
        self.busy = False

    def update(self, now: float, busy: bool) -> None:
        dt = now - self.t
        if dt > 0:
            decay = math.exp(-dt / self.tau)
            self.value = self.value * decay + (1.0 - decay) * (1.0 if self.busy else 0.0)
        self.t = max(self.t, now)
        self.busy = busy

    def read(self, now: float) -> float:
        dt = max(0.0, now - self.t)
        decay = math.exp(-dt / self.tau)
        return self.value * decay + (1.0 - decay) * (1.0 if self.busy else 0.0)


class Instance:
    """One simulated LLM instance: KV capacity, running batch, prefill queue and look-ahead map."""

    def __init__(self, instance_id: int, kv_capacity: int, map_length: int = 4096,
                 status: InstanceStatus = InstanceStatus.ACTIVE, boot_done_at: float = 0.0):
        self.instance_id = instance_id
        self.kv_capacity = int(kv_capacity)
        self.kv_used = 0
        self.status = status
        self.boot_done_at = boot_done_at
        self.queue: Deque[Request] = deque()
        self.residents: List[Request] = []  # admission order
        self.lookahead = LookAheadMap(kv_capacity, map_length)
        self.plan: Optional[IterationPlan] = None
        self.iterations = 0
        self.tokens_generated = 0
        self.prefill_tokens_done = 0
        self.busy = BusyMeter()
        self.recent_latency = 0.0
        self._seq = itertools.count()

    # -- views -----------------------------------------------------------------

    @property
    def routable(self) -> bool:
        return self.status is InstanceStatus.ACTIVE

    @property
    def decoders(self) -> List[Request]:
        return [r for r in self.residents if r.state is RequestState.DECODING]

    @property
    def has_work(self) -> bool:
        return bool(self.queue or self.residents)

    @property
    def kv_usage(self) -> float:
        return self.kv_used / self.kv_capacity

    def queued_prefill_tokens(self) -> int:
        """Prompt tokens assigned to this instance that still await prefill."""
        total = sum(r.prefill_target for r in self.queue)
        for r in self.residents:
            if r.state is RequestState.PREFILLING:
                total += r.prefill_target - r.prefilled
        return total

    def outstanding_decode_tokens(self) -> int:
        """Predicted tokens still to be generated by every request assigned here."""
        return sum(r.predicted_remaining for r in self.queue) + sum(r.predicted_remaining for r in self.residents)

    def pending_projections(self) -> List[Tuple[int, int]]:
        """``(prompt, predicted)`` of assigned requests not yet in the look-ahead map."""
        out = [(r.prefill_target, max(1, r.predicted_remaining)) for r in self.queue]
        out.extend((r.prefill_target, max(1, r.predicted_remaining))
                   for r in self.residents if r.state is RequestState.PREFILLING)
        return out

    def active_requests(self) -> int:
        return len(self.queue) + len(self.residents)

    def resident_tokens(self) -> int:
        return self.kv_used + sum(r.prefill_target for r in self.queue)

    def kv_ledger_ok(self) -> bool:
        return (
            self.kv_used == sum(r.prompt_tokens + r.generated_tokens for r in self.residents)
            and self.kv_used <= self.kv_capacity
        )

    # -- mutations -------------------------------------------------------------

    def enqueue(self, req: Request, front: bool = False) -> None:
        req.instance = self.instance_id
        req.state = RequestState.QUEUED_INSTANCE if not front else RequestState.PREEMPTED
        if front:
            self.queue.appendleft(req)
        else:
            self.queue.append(req)

    def _release(self, req: Request) -> None:
        self.kv_used -= req.kv
        req.kv = 0
        req.prefilled = 0
        self.residents.remove(req)

    def preempt_if_needed(self, growth: Optional[int] = None) -> Tuple[List[Request], List[Request]]:
        """Evict latest-admitted residents until the next step's KV growth fits.

        ``growth`` defaults to one token per decoder plus one per prefilling
        request. Returns ``(preempted, aborted)``; a lone resident that cannot
        fit is aborted as oversize.
        """
        preempted: List[Request] = []
        aborted: List[Request] = []

        def need() -> int:
            if growth is not None:
                return growth - len(preempted)
            return sum(1 for r in self.residents if r.state in (RequestState.DECODING, RequestState.PREFILLING))

        while self.residents and self.kv_used + need() > self.kv_capacity:
            victim = self.residents[-1]
            was_mapped = victim.state is RequestState.DECODING
            if len(self.residents) == 1:
                self._release(victim)
                if was_mapped:
                    self.lookahead.evict(victim.id)
                victim.state = RequestState.ABORTED
                victim.abort_reason = "oversize"
                aborted.append(victim)
                break
            self._release(victim)
            if was_mapped:
                self.lookahead.evict(victim.id)
            victim.preemptions += 1
            preempted.append(victim)
        # Evicted requests go back in front of the queue, earliest-admitted first.
        for r in reversed(preempted):
            self.enqueue(r, front=True)
        return preempted, aborted

    def plan_iteration(self, now: float, cost: CostModel) -> Tuple[Optional[IterationPlan], TokenEvents]:
        """Decide the next iteration's batch. Returns ``(plan, events)``; plan is None when idle."""
        events = TokenEvents(0.0)
        if self.status in (InstanceStatus.BOOTING, InstanceStatus.STOPPED):
            return None, events

        # A queued request larger than the whole cache can never run.
        while self.queue and self.queue[0].prefill_target + 1 > self.kv_capacity:
            r = self.queue.popleft()
            r.state = RequestState.ABORTED
            r.abort_reason = "oversize"
            events.aborted.append(r)

        preempted, aborted = self.preempt_if_needed()
        events.preempted.extend(preempted)
        events.aborted.extend(aborted)

        decoders = [r for r in self.residents if r.state is RequestState.DECODING]
        growth = len(decoders) + sum(1 for r in self.residents if r.state is RequestState.PREFILLING)
        budget = cost.max_prefill_chunk
        prefill: List[Tuple[Request, int]] = []
        for r in self.residents:
            if budget <= 0:
                break
            if r.state is RequestState.PREFILLING:
                n = min(budget, r.prefill_target - r.prefilled)
                prefill.append((r, n))
                budget -= n
        while budget > 0 and self.queue:
            head = self.queue[0]
            need = head.prefill_target
            if self.kv_used + growth + need + 1 > self.kv_capacity:
                break
            self.queue.popleft()
            head.state = RequestState.PREFILLING
            head.admit_seq = next(self._seq)
            head.kv = need
            head.prefilled = 0
            self.kv_used += need
            self.residents.append(head)
            growth += 1
            n = min(budget, need)
            prefill.append((head, n))
            budget -= n

        if not decoders and not prefill:
            return None, events
        n_prefill = sum(n for _, n in prefill)
        elapsed = cost.iteration_latency(n_prefill, len(decoders))
        events.elapsed = elapsed
        plan = IterationPlan(now, elapsed, decoders, prefill)
        self.plan = plan
        self.busy.update(now, True)
        return plan, events

    def finish_iteration(self, now: float, events: Optional[TokenEvents] = None) -> TokenEvents:
        """Apply the effects of the planned iteration at its completion time ``now``."""
        plan = self.plan
        if plan is None:
            raise SimulationError(f"instance {self.instance_id} has no iteration in flight")
        self.plan = None
        ev = events if events is not None else TokenEvents(plan.elapsed)
        ev.elapsed = plan.elapsed
        la = self.lookahead
        done: List[Request] = []

        for r in plan.decoders:
            r.emit_token(now)
            r.kv += 1
            self.kv_used += 1
            ev.tokens += 1
            if r.generated_tokens >= r.true_response_tokens:
                done.append(r)

        for r, n in plan.prefill:
            r.prefilled += n
            self.prefill_tokens_done += n
            if r.prefilled < r.prefill_target:
                continue
            offset = r.generated_tokens
            r.emit_token(now)
            r.kv += 1
            self.kv_used += 1
            ev.tokens += 1
            if offset == 0:
                ev.first_tokens.append(r)
            if r.generated_tokens >= r.true_response_tokens:
                done.append(r)
                continue
            r.state = RequestState.DECODING
            r.map_offset = offset
            la.admit(r.id, r.prefill_target - 1, max(1, r.predicted_response_tokens - offset))

        for r in done:
            if r.id in la.ledger:
                la.complete(r.id, r.true_response_tokens - r.map_offset)
            self._release(r)
            r.state = RequestState.COMPLETED
            r.completion_time = now
            ev.completed.append(r)

        la.advance(1)
        self.iterations += 1
        self.tokens_generated += ev.tokens
        self.recent_latency = plan.elapsed if self.recent_latency == 0 else 0.9 * self.recent_latency + 0.1 * plan.elapsed
        self.busy.update(now, False)
        return ev


def step_iteration(instance: Instance, cost: CostModel, now: float = 0.0) -> Tuple[float, TokenEvents]:
    """Plan and immediately complete one iteration; returns ``(elapsed, events)``."""
    plan, pre = instance.plan_iteration(now, cost)
    if plan is None:
        return 0.0, pre
    ev = instance.finish_iteration(now + plan.elapsed, pre)
    return plan.elapsed, ev


# ---------------------------------------------------------------------------
# Cluster


class Cluster:
    """The set of instances plus boot/isolation mechanics."""

    def __init__(self, kv_capacity: int, map_length: int = 4096, max_instances: int = 8,
                 min_instances: int = 1):
        if min_instances < 0 or max_instances < max(1, min_instances):
            raise ValueError("need 0 <= min_instances <= max_instances and max_instances >= 1")
        self.kv_capacity = kv_capacity
        self.map_length = map_length
        self.max_instances = max_instances
        self.min_instances = min_instances
        self.instances: List[Instance] = []
        self.now = 0.0

    def _new(self, status: InstanceStatus, boot_done_at: float) -> Instance:
        inst = Instance(len(self.instances), self.kv_capacity, self.map_length, status, boot_done_at)
        self.instances.append(inst)
        return inst

    def add_active(self) -> Instance:
        if self.held() >= self.max_instances:
            raise ScaleDenied(f"cluster already holds {self.held()}/{self.max_instances} instances")
        return self._new(InstanceStatus.ACTIVE, 0.0)

    def boot_instance(self, cost: CostModel, now: float) -> int:
        """Start a cold instance; it becomes routable at ``now + cold_start_time``."""
        if self.held() >= self.max_instances:
            raise ScaleDenied(f"cluster already holds {self.held()}/{self.max_instances} instances")
        return self._new(InstanceStatus.BOOTING, now + cost.cold_start_time).instance_id

    def by_status(self, *statuses: InstanceStatus) -> List[Instance]:
        return [i for i in self.instances if i.status in statuses]

    @property
    def active(self) -> List[Instance]:
        return self.by_status(InstanceStatus.ACTIVE)

    def current_count(self) -> int:
        """N_c: active plus booting instances."""
        return len(self.by_status(InstanceStatus.ACTIVE, InstanceStatus.BOOTING))

    def held(self) -> int:
        """Instances holding hardware (everything not stopped)."""
        return len(self.instances) - len(self.by_status(InstanceStatus.STOPPED))

    def isolation_candidates(self) -> List[Instance]:
        """Active/booting instances ordered fewest resident tokens first (booting ones are empty)."""
        cands = self.by_status(InstanceStatus.ACTIVE, InstanceStatus.BOOTING)
        return sorted(cands, key=lambda i: (i.status is InstanceStatus.ACTIVE, i.resident_tokens(), i.instance_id))


# ---------------------------------------------------------------------------
# Event queue


class EventKind(IntEnum):
    # Lower value is dispatched first among same-time events.
    BOOT_DONE = 0
    ITERATION_DONE = 1
    WINDOW = 2
    TICK = 3
    SAMPLE = 4
    ARRIVAL = 5
    DUMP = 6


class EventQueue:
    def __init__(self):
        self._heap: List[Tuple[float, int, int, Any]] = []
        self._seq = itertools.count()
        self.now = 0.0

    def push(self, time: float, kind: EventKind, payload: Any = None) -> None:
        if time < self.now:
            raise SimulationError(f"event at {time} scheduled in the past (now={self.now})")
        heapq.heappush(self._heap, (time, int(kind), next(self._seq), payload))

    def pop(self) -> Tuple[float, EventKind, Any]:
        time, kind, _, payload = heapq.heappop(self._heap)
        self.now = time
        return time, EventKind(kind), payload

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


# ---------------------------------------------------------------------------
# Scaling actions shared with the scaler module


@dataclass(frozen=True)
class ScaleAction:
    kind: str  # "boot" | "isolate"
    count: int
    reason: str


@dataclass
class SimConfig:
    kv_capacity: int = 6000
    map_length: int = 4096
    initial_instances: int = 1
    min_instances: int = 1
    max_instances: int = 8
    window_length: float = 600.0
    scaler_tick: float = 10.0
    sample_interval: float = 300.0
    router_queue_capacity: int = 256
    horizon: Optional[float] = None  # accounting end time; defaults to the last event
    check_invariants: bool = False
    event_log: bool = False
    anticipator_dump_interval: Optional[float] = None  # seconds between map snapshots in the event log

    def validate(self) -> None:
        if self.kv_capacity <= 0 or self.map_length <= 0:
            raise ValueError("kv_capacity and map_length must be positive")
        if not (0 <= self.min_instances <= self.max_instances) or self.max_instances < 1:
            raise ValueError("need 0 <= min_instances <= max_instances, max_instances >= 1")
        if not (self.min_instances <= self.initial_instances <= self.max_instances):
            raise ValueError("initial_instances must lie within [min_instances, max_instances]")
        if self.initial_instances < 1:
            raise ValueError("at least one initial instance is required")
        if self.window_length <= 0 or self.scaler_tick <= 0 or self.sample_interval <= 0:
            raise ValueError("window_length, scaler_tick and sample_interval must be positive")
        if self.router_queue_capacity < 0:
            raise ValueError("router_queue_capacity must be >= 0")
        if self.anticipator_dump_interval is not None and self.anticipator_dump_interval <= 0:
            raise ValueError("anticipator_dump_interval must be positive")


@dataclass
class Policies:
    router: Any
    scaler: Any = None
    loadpred: Any = None
    forecaster: Any = None


@dataclass
class SimResult:
    """Raw outcome of a simulation, turned into a report by :mod:`lmaas_sim.metrics`."""

    requests: List[Request]
    count_series: List[Tuple[float, int, int]]  # (time, held instances, active+booting)
    end_time: float
    samples: List[Dict[str, Any]]
    scaling: List[Dict[str, Any]]
    window_stats: List[Dict[str, Any]]
    routing_overheads: List[float]
    events: List[Dict[str, Any]]
    anticipator_corrections: Dict[str, int]
    invariant_violations: List[str]
    max_held: int
    instances_created: int


class Simulator:
    """Event loop binding a trace, a cluster and the management policies."""

    def __init__(self, trace, policies: Policies, cost: CostModel, config: SimConfig,
                 clock: Optional[Callable[[], float]] = None):
        import time as _time

        config.validate()
        if policies.router is None:
            raise ValueError("a router policy is required")
        self.trace = trace
        self.policies = policies
        self.cost = cost
        self.config = config
        self.clock = clock or _time.perf_counter
        self.cluster = Cluster(config.kv_capacity, config.map_length, config.max_instances, config.min_instances)
        self.events = EventQueue()
        self.router_queue: Deque[Request] = deque()
        self.requests: List[Request] = []
        self.count_series: List[Tuple[float, int, int]] = []
        self.samples: List[Dict[str, Any]] = []
        self.scaling_log: List[Dict[str, Any]] = []
        self.window_stats: List[Dict[str, Any]] = []
        self.event_log: List[Dict[str, Any]] = []
        self.violations: List[str] = []
        self.unfinished = 0
        self.pending_arrivals = 0
        self.last_time = 0.0
        self.max_held = 0
        self._window_prompt = 0
        self._window_decode = 0
        self._window_index = 0

    # -- logging helpers ---------------------------------------------------------

    def log(self, kind: str, **fields) -> None:
        if self.config.event_log:
            rec = {"time": round(self.events.now, 9), "event": kind}
            rec.update(fields)
            self.event_log.append(rec)

    def _record_count(self) -> None:
        held = self.cluster.held()
        nc = self.cluster.current_count()
        self.max_held = max(self.max_held, held)
        t = self.events.now
        if self.count_series and self.count_series[-1][0] == t:
            self.count_series[-1] = (t, held, nc)
        elif not self.count_series or self.count_series[-1][1:] != (held, nc):
            self.count_series.append((t, held, nc))
        if held > self.config.max_instances:
            self.violations.append(f"t={t}: {held} instances held > max {self.config.max_instances}")

    # -- scaling -------------------------------------------------------------------

    def apply(self, actions: Sequence[ScaleAction]) -> None:
        now = self.events.now
        for act in actions:
            if act.count <= 0:
                continue
            if act.kind == "boot":
                done = 0
                for _ in range(act.count):
                    if self._scale_up(now):
                        done += 1
                    else:
                        self.scaling_log.append({"time": now, "reason": act.reason, "delta": 0, "denied": True})
                        self.log("scale_denied", reason=act.reason)
                        break
                if done:
                    self.scaling_log.append({"time": now, "reason": act.reason, "delta": done, "denied": False})
                    self.log("scale", reason=act.reason, delta=done)
            elif act.kind == "isolate":
                n = self._scale_down(act.count)
                if n:
                    self.scaling_log.append({"time": now, "reason": act.reason, "delta": -n, "denied": False})
                    self.log("scale", reason=act.reason, delta=-n)
            else:
                raise SimulationError(f"unknown scaling action {act.kind!r}")
        self._record_count()
        self._drain_router_queue()

    def _scale_up(self, now: float) -> bool:
        if self.cluster.current_count() >= self.config.max_instances:
            return False
        # A draining instance is warm: put it back into rotation instead of booting.
        isolated = self.cluster.by_status(InstanceStatus.ISOLATED)
        if isolated:
            inst = max(isolated, key=lambda i: (i.resident_tokens(), -i.instance_id))
            inst.status = InstanceStatus.ACTIVE
            self.log("reactivate", instance=inst.instance_id)
            return True
        try:
            iid = self.cluster.boot_instance(self.cost, now)
        except ScaleDenied:
            return False
        inst = self.cluster.instances[iid]
        self.events.push(inst.boot_done_at, EventKind.BOOT_DONE, inst)
        self.log("boot", instance=iid, ready_at=inst.boot_done_at)
        return True

    def _scale_down(self, count: int) -> int:
        removable = self.cluster.current_count() - self.config.min_instances
        n = 0
        for inst in self.cluster.isolation_candidates():
            if n >= min(count, removable):
                break
            if inst.status is InstanceStatus.BOOTING:
                inst.status = InstanceStatus.STOPPED
                self.log("cancel_boot", instance=inst.instance_id)
            else:
                inst.status = InstanceStatus.ISOLATED
                self.log("isolate", instance=inst.instance_id)
                self._maybe_stop(inst)
            n += 1
        return n

    def _maybe_stop(self, inst: Instance) -> None:
        if inst.status is InstanceStatus.ISOLATED and not inst.has_work and inst.plan is None:
            inst.status = InstanceStatus.STOPPED
            self.log("stop", instance=inst.instance_id)

    # -- request flow -----------------------------------------------------------------

    def _terminate(self, req: Request, reason: str = "") -> None:
        self.unfinished -= 1
        if req.state is RequestState.ABORTED:
            self.log("abort", request=req.id, reason=req.abort_reason or reason)
        else:
            self.log("complete", request=req.id, instance=req.instance)
            if self.policies.loadpred is not None and hasattr(self.policies.loadpred, "observe"):
                self.policies.loadpred.observe(req)

    def _dispatch(self, req: Request, inst: Instance) -> None:
        req.dispatch_time = self.events.now
        inst.enqueue(req)
        self._kick(inst)

    def _route(self, req: Request, queued: bool) -> str:
        router = self.policies.router
        t0 = self.clock()
        decision = router.route(req, self.cluster, len(self.router_queue) - (1 if queued else 0))
        req.route_overhead += self.clock() - t0
        if decision.kind == "dispatch":
            inst = self.cluster.instances[decision.instance]
            if not inst.routable:
                raise SimulationError(f"router chose non-active instance {decision.instance}")
            self.log("route", request=req.id, instance=decision.instance, **decision.log_fields())
            self._dispatch(req, inst)
        return decision.kind

    def _drain_router_queue(self) -> None:
        while self.router_queue:
            req = self.router_queue[0]
            kind = self._route(req, queued=True)
            if kind != "dispatch":
                break
            self.router_queue.popleft()

    def _arrive(self, req: Request) -> None:
        self.pending_arrivals -= 1
        self._window_prompt += req.prompt_tokens
        self._window_decode += req.true_response_tokens
        t0 = self.clock()
        if self.policies.loadpred is not None:
            req.predicted_response_tokens = int(self.policies.loadpred.predict(req).predicted_tokens)
        else:
            req.predicted_response_tokens = req.true_response_tokens
        req.route_overhead = self.clock() - t0
        self.log("arrival", request=req.id, prompt=req.prompt_tokens, predicted=req.predicted_response_tokens)
        if self.router_queue:
            kind = "enqueue"  # FIFO: never overtake requests already waiting
            if len(self.router_queue) >= self.config.router_queue_capacity:
                kind = "abort"
        else:
            kind = self._route(req, queued=False)
        if kind == "enqueue":
            req.state = RequestState.QUEUED_ROUTER
            self.router_queue.append(req)
            self.log("enqueue", request=req.id, queue=len(self.router_queue))
        elif kind == "abort":
            req.state = RequestState.ABORTED
            req.abort_reason = "router-queue-full"
            self._terminate(req)

    def _kick(self, inst: Instance) -> None:
        """Start an iteration on an idle instance."""
        if inst.plan is not None or inst.status not in (InstanceStatus.ACTIVE, InstanceStatus.ISOLATED):
            return
        now = self.events.now
        plan, ev = inst.plan_iteration(now, self.cost)
        self._account(inst, ev)
        if plan is not None:
            self.events.push(now + plan.elapsed, EventKind.ITERATION_DONE, inst)
        else:
            inst.busy.update(now, False)
            self._maybe_stop(inst)

    def _account(self, inst: Instance, ev: TokenEvents) -> None:
        for r in ev.preempted:
            self.log("preempt", request=r.id, instance=inst.instance_id)
        for r in ev.aborted:
            self._terminate(r)
        for r in ev.completed:
            self._terminate(r)
        for r in ev.first_tokens:
            self.log("first_token", request=r.id, instance=inst.instance_id)

    def _iteration_done(self, inst: Instance) -> None:
        ev = inst.finish_iteration(self.events.now)
        self._account(inst, ev)
        if self.config.check_invariants and not inst.kv_ledger_ok():
            self.violations.append(f"t={self.events.now}: KV ledger mismatch on instance {inst.instance_id}")
        self._kick(inst)
        if self.router_queue:
            self._drain_router_queue()

    # -- periodic control ---------------------------------------------------------------

    def _more_to_do(self) -> bool:
        return self.pending_arrivals > 0 or self.unfinished > 0

    def _window(self, index: int) -> None:
        now = self.events.now
        prev = None
        if index > 0:
            prev = (self._window_prompt, self._window_decode)
            self.window_stats.append({"window": index - 1, "prompt": prev[0], "decode": prev[1]})
        self._window_prompt = self._window_decode = 0
        scaler, fc = self.policies.scaler, self.policies.forecaster
        target = fc.window_target(prev) if fc is not None else None
        if scaler is not None and hasattr(scaler, "on_window"):
            self.apply(scaler.on_window(self.cluster, now, target))
        if self._more_to_do():
            self.events.push(now + self.config.window_length, EventKind.WINDOW, index + 1)

    def _tick(self) -> None:
        now = self.events.now
        scaler = self.policies.scaler
        if scaler is not None and hasattr(scaler, "on_tick"):
            self.apply(scaler.on_tick(self.cluster, now))
        if self._more_to_do():
            self.events.push(now + self.config.scaler_tick, EventKind.TICK)

    def _sample(self) -> None:
        now = self.events.now
        for inst in self.cluster.instances:
            if inst.status is InstanceStatus.STOPPED:
                continue
            self.samples.append({
                "time": now,
                "instance": inst.instance_id,
                "status": inst.status.value,
                "kv_usage": inst.kv_usage,
                "queued_prefill_tokens": inst.queued_prefill_tokens(),
                "running": len(inst.residents),
                "queued": len(inst.queue),
                "projected_peak": inst.lookahead.peek_peak(min(100, inst.lookahead.length)),
            })
        if self._more_to_do():
            self.events.push(now + self.config.sample_interval, EventKind.SAMPLE)

    def _dump(self) -> None:
        now = self.events.now
        for inst in self.cluster.instances:
            if inst.status is InstanceStatus.STOPPED:
                continue
            lm = inst.lookahead
            self.log("anticipator", instance=inst.instance_id, origin=lm.origin,
                     usage=[round(float(u), 6) for u in lm.usage(min(100, lm.length))])
        if self._more_to_do():
            self.events.push(now + self.config.anticipator_dump_interval, EventKind.DUMP)

    # -- main loop ------------------------------------------------------------------------

    def run(self) -> SimResult:
        cfg = self.config
        for n, rec in enumerate(self.trace):
            req = Request(n, rec.arrival_time, rec.prompt_tokens, rec.response_tokens, name=rec.request_id)
            self.requests.append(req)
            self.events.push(rec.arrival_time, EventKind.ARRIVAL, req)
        self.pending_arrivals = self.unfinished = len(self.requests)

        for _ in range(cfg.initial_instances):
            self.cluster.add_active()
        self._record_count()
        scaler = self.policies.scaler
        if self.requests:
            if scaler is not None or self.policies.forecaster is not None:
                self.events.push(0.0, EventKind.WINDOW, 0)
            if scaler is not None and hasattr(scaler, "on_tick"):
                self.events.push(cfg.scaler_tick, EventKind.TICK)
            self.events.push(0.0, EventKind.SAMPLE)
            if cfg.event_log and cfg.anticipator_dump_interval:
                self.events.push(0.0, EventKind.DUMP)

        while self.events:
            t, kind, payload = self.events.pop()
            if t < self.last_time:
                self.violations.append(f"clock went backwards: {t} < {self.last_time}")
            self.last_time = t
            self.cluster.now = t
            if kind is EventKind.ARRIVAL:
                self._arrive(payload)
            elif kind is EventKind.ITERATION_DONE:
                self._iteration_done(payload)
            elif kind is EventKind.BOOT_DONE:
                inst = payload
                if inst.status is InstanceStatus.BOOTING:
                    inst.status = InstanceStatus.ACTIVE
                    self.log("active", instance=inst.instance_id)
                    self._record_count()
                    self._drain_router_queue()
            elif kind is EventKind.WINDOW:
                self._window(payload)
            elif kind is EventKind.TICK:
                self._tick()
            elif kind is EventKind.SAMPLE:
                self._sample()
            elif kind is EventKind.DUMP:
                self._dump()

        # Requests stranded in the router queue with no instance left to serve them.
        while self.router_queue:
            req = self.router_queue.popleft()
            req.state = RequestState.ABORTED
            req.abort_reason = "stranded"
            self._terminate(req)

        end = self.last_time if cfg.horizon is None else max(self.last_time, cfg.horizon)
        if cfg.check_invariants:
            self._final_checks()
        return SimResult(
            requests=self.requests,
            count_series=list(self.count_series),
            end_time=end,
            samples=self.samples,
            scaling=self.scaling_log,
            window_stats=self.window_stats,
            routing_overheads=[r.route_overhead for r in self.requests],
            events=self.event_log,
            anticipator_corrections={
                "early": sum(i.lookahead.early_corrections for i in self.cluster.instances),
                "late": sum(i.lookahead.late_extensions for i in self.cluster.instances),
            },
            invariant_violations=self.violations,
            max_held=self.max_held,
            instances_created=len(self.cluster.instances),
        )

    def _final_checks(self) -> None:
        for r in self.requests:
            if not r.finished:
                self.violations.append(f"request {r.id} never terminated ({r.state.value})")
            elif r.state is RequestState.COMPLETED and r.generated_tokens != r.true_response_tokens:
                self.violations.append(f"request {r.id} generated {r.generated_tokens} != {r.true_response_tokens}")
        served = sum(inst.tokens_generated for inst in self.cluster.instances)
        owed = sum(r.generated_tokens for r in self.requests)
        if served != owed:
            self.violations.append(f"token conservation broken: instances emitted {served}, requests hold {owed}")
        for inst in self.cluster.instances:
            if inst.kv_used != 0 or inst.residents or inst.queue:
                self.violations.append(f"instance {inst.instance_id} not drained at end")
