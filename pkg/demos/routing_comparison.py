"""Compare the load-aware router with least-request and minimum-use on a fixed 4-instance pool."""

import argparse
import logging

from lmaas_sim.scenarios import RoutingScenario, run_routing_cell

logging.basicConfig(level=logging.INFO, format="%(message)s")
log = logging.getLogger("demo")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--qps", type=float, nargs="+", default=[8.0, 10.0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--duration", type=float, default=300.0)
    args = ap.parse_args()
    sc = RoutingScenario(duration=args.duration)
    log.info("%-11s %5s %9s %9s %7s", "policy", "qps", "p99_norm", "ttft", "slo")
    for qps in args.qps:
        for policy in sc.policies:
            _, rep = run_routing_cell(policy, qps, args.seed, sc)
            a = rep.aggregates
            log.info("%-11s %5.1f %9.3f %9.3f %7.3f", policy, qps, a["normalized_latency_p99"],
                     a["ttft_mean"], a["slo_attainment_with_aborts"])


if __name__ == "__main__":
    main()
