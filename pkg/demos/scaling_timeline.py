"""Replay two compressed days with a 1.5x spike under several scaling policies.

Prints instance-seconds, SLO attainment and the peak latency around the spike,
then the load-aware policy's instance count per window.
"""

import logging

import numpy as np

from lmaas_sim.scenarios import ScalingScenario, prepare_scaling, run_scaling, spike_peak

logging.basicConfig(level=logging.INFO, format="%(message)s")
log = logging.getLogger("demo")


def main():
    sc = ScalingScenario()
    setup = prepare_scaling(sc)
    log.info("capacity per instance: %s", setup.capacity.as_dict())
    runs = {
        "load-aware": ("nailbench", None),
        "reactive": ("reactive", None),
        "hybrid": ("hybrid", None),
        "static-8": (None, sc.max_instances),
    }
    series = None
    for label, (scaler, fixed) in runs.items():
        res, rep = run_scaling(setup, scaler, "noisy", fixed=fixed)
        a = rep.aggregates
        log.info("%-10s instance_s=%8.0f slo=%.3f spike_peak=%.3f", label, a["instance_seconds"],
                 a["slo_attainment_with_aborts"], spike_peak(rep, sc) or float("nan"))
        if label == "load-aware":
            series = res.count_series
    t = np.array([s[0] for s in series])
    n = np.array([s[2] for s in series])
    per_window = [int(n[t <= (w + 1) * sc.window][-1]) for w in range(len(setup.needs))]
    log.info("needed : %s", setup.needs)
    log.info("running: %s", per_window)


if __name__ == "__main__":
    main()
