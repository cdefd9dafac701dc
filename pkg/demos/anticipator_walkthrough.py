"""Walk one instance's look-ahead map through admit, extension and early completion."""

import logging

from lmaas_sim.anticipator import LookAheadMap

logging.basicConfig(level=logging.INFO, format="%(message)s")
log = logging.getLogger("demo")


def show(m, label, n=12):
    log.info("%-28s %s", label, " ".join(f"{u:.2f}" for u in m.usage(n)))


def main():
    m = LookAheadMap(capacity=100, length=32)
    m.admit("a", 10, 5)
    show(m, "admit a (P=10, D=5)")
    m.admit("b", 20, 8)
    show(m, "admit b (P=20, D=8)")
    m.advance(5)
    show(m, "after 5 iterations")  # a is exhausted and gets extended by 20%
    log.info("late extensions so far: %d", m.late_extensions)
    m.correct_early("b", 6)
    show(m, "b finishes at 6 of 8")
    log.info("peak over 10 iterations with a virtual (50, 4): %.2f", m.peek_peak(10, (50, 4)))


if __name__ == "__main__":
    main()
