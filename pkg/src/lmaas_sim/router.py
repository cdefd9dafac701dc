"""Request routers.

:class:`LoadAwareRouter` estimates, for every active instance, the load it
would carry if the request were placed there::

    L = (queued_p + P) + (current_d + D) + beta * max(0, U_k - T_mem) * M

where ``U_k`` is the peak projected KV usage over the next ``l`` iterations
with the request virtually admitted. The request goes to the argmin (ties to
the lowest instance id). When every active instance is overloaded the request
waits in the router queue; past the queue capacity it is aborted.

The baselines are round-robin, least-request (fewest requests assigned) and
minimum-use (lowest mean of compute occupancy and KV usage).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .anticipator import DEFAULT_HORIZON

OVERLOAD_USAGE = 0.95
OVERLOAD_FRACTION = 0.10


@dataclass(frozen=True)
class RouterConfig:
    memory_penalty: float = 1.0  # beta
    ideal_memory_threshold: float = 0.80  # T_mem
    queue_capacity: int = 256
    horizon: int = DEFAULT_HORIZON
    overload_usage: float = OVERLOAD_USAGE
    overload_fraction: float = OVERLOAD_FRACTION
    policy: str = "load_aware"

    def __post_init__(self):
        if self.memory_penalty < 0:
            raise ValueError("memory_penalty must be >= 0")
        if not 0 < self.ideal_memory_threshold <= 1:
            raise ValueError("ideal_memory_threshold must lie in (0, 1]")
        if self.queue_capacity < 0:
            raise ValueError("queue_capacity must be >= 0")


@dataclass(frozen=True)
class RouteScore:
    prefill: float  # L_p
    decode: float  # L_d
    memory: float  # L_m
    beta: float = 1.0

    @property
    def total(self) -> float:
        return self.prefill + self.decode + self.beta * self.memory


@dataclass
class Decision:
    kind: str  # "dispatch" | "enqueue" | "abort"
    instance: Optional[int] = None
    scores: Dict[int, RouteScore] = field(default_factory=dict)

    def log_fields(self) -> dict:
        if self.instance is None or self.instance not in self.scores:
            return {}
        s = self.scores[self.instance]
        return {"L_p": s.prefill, "L_d": s.decode, "L_m": s.memory, "L": s.total}


def score(instance, prompt: int, predicted: int, config: RouterConfig = RouterConfig()) -> RouteScore:
    """Estimated load of ``instance`` if a request ``(prompt, predicted)`` were added."""
    queued_p = instance.queued_prefill_tokens()
    current_d = instance.outstanding_decode_tokens()
    peak = instance.lookahead.peek_peak(config.horizon, instance.pending_projections() + [(prompt, predicted)])
    memory = max(0.0, peak - config.ideal_memory_threshold) * instance.kv_capacity
    return RouteScore(queued_p + prompt, current_d + predicted, memory, config.memory_penalty)


def score_from_parts(queued_p, current_d, prompt, predicted, peak, threshold, capacity, beta=1.0) -> RouteScore:
    memory = max(0.0, peak - threshold) * capacity
    return RouteScore(queued_p + prompt, current_d + predicted, memory, beta)


def is_overloaded(instance, config: RouterConfig, virtual=None) -> bool:
    """Overload rule applied to the map plus every assigned-but-unadmitted request (and ``virtual``).

    An idle instance is never overloaded: a request too large to pass the
    rule on an empty instance would otherwise wait forever.
    """
    if not instance.has_work:
        return False
    extra = instance.pending_projections()
    if virtual is not None:
        extra.append(tuple(virtual))
    frac = instance.lookahead.overload_fraction(config.horizon, config.overload_usage, extra)
    return frac > config.overload_fraction


class LoadAwareRouter:
    name = "load_aware"

    def __init__(self, config: RouterConfig = RouterConfig()):
        self.config = config

    def route(self, request, cluster, queue_len: int = 0) -> Decision:
        active = [i for i in cluster.instances if i.routable]
        p, d = request.prefill_target, max(1, request.predicted_remaining)
        if not active or all(is_overloaded(i, self.config, (p, d)) for i in active):
            if queue_len >= self.config.queue_capacity:
                return Decision("abort")
            return Decision("enqueue")
        scores = {i.instance_id: score(i, p, d, self.config) for i in active}
        best = min(scores, key=lambda iid: (scores[iid].total, iid))
        return Decision("dispatch", best, scores)


class _BaselineRouter:
    """Dispatch immediately to some active instance; queue only when none is active."""

    def __init__(self, queue_capacity: int = 256):
        self.queue_capacity = queue_capacity

    def route(self, request, cluster, queue_len: int = 0) -> Decision:
        active = [i for i in cluster.instances if i.routable]
        if not active:
            return Decision("abort") if queue_len >= self.queue_capacity else Decision("enqueue")
        return Decision("dispatch", self.choose(active, cluster))

    def choose(self, active: Sequence, cluster) -> int:
        raise NotImplementedError


class RoundRobinRouter(_BaselineRouter):
    name = "rr"

    def __init__(self, queue_capacity: int = 256):
        super().__init__(queue_capacity)
        self._next = 0

    def choose(self, active, cluster) -> int:
        ids = sorted(i.instance_id for i in active)
        # Next id at or after the cursor, wrapping around.
        pick = next((iid for iid in ids if iid >= self._next), ids[0])
        self._next = pick + 1
        return pick


class LeastRequestRouter(_BaselineRouter):
    name = "lr"

    def choose(self, active, cluster) -> int:
        return min(active, key=lambda i: (i.active_requests(), i.instance_id)).instance_id


class MinimumUseRouter(_BaselineRouter):
    name = "mu"

    def __init__(self, queue_capacity: int = 256, compute_weight: float = 0.5):
        super().__init__(queue_capacity)
        self.compute_weight = compute_weight

    def usage(self, inst, now: float) -> float:
        w = self.compute_weight
        return w * inst.busy.read(now) + (1 - w) * inst.kv_usage

    def choose(self, active, cluster) -> int:
        now = getattr(cluster, "now", 0.0)
        return min(active, key=lambda i: (self.usage(i, now), i.instance_id)).instance_id


def baseline_route(policy: str, usages: Sequence, cursor: int = 0) -> int:
    """Index chosen by a baseline policy over plain per-instance numbers.

    ``usages`` holds request counts for ``"lr"``, ``(compute, kv)`` pairs for
    ``"mu"`` and is only used for its length by ``"rr"`` (``cursor`` = number of
    requests routed so far).
    """
    policy = policy.lower()
    if not usages:
        raise ValueError("no active instances")
    if policy == "rr":
        return cursor % len(usages)
    if policy == "lr":
        return min(range(len(usages)), key=lambda i: (usages[i], i))
    if policy == "mu":
        return min(range(len(usages)), key=lambda i: (0.5 * usages[i][0] + 0.5 * usages[i][1], i))
    raise ValueError(f"unknown baseline policy {policy!r}")


ROUTERS = {
    "load_aware": LoadAwareRouter,
    "nailbench": LoadAwareRouter,
    "rr": RoundRobinRouter,
    "lr": LeastRequestRouter,
    "mu": MinimumUseRouter,
}


def make_router(name: str, config: Optional[RouterConfig] = None):
    key = name.lower()
    if key not in ROUTERS:
        raise ValueError(f"unknown router {name!r}; choose from {sorted(ROUTERS)}")
    config = config or RouterConfig()
    cls = ROUTERS[key]
    if cls is LoadAwareRouter:
        return cls(config)
    return cls(config.queue_capacity)
