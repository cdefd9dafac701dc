"""Per-instance load-look-ahead map.

The map projects KV-cache occupancy for the next ``L`` iterations of one
instance. A request admitted at iteration ``a`` with prompt ``P`` and predicted
length ``D`` contributes ``P + i`` tokens to absolute iteration ``a + i`` for
``i in [0, D)``. Completions before the predicted length remove the tail of the
contribution; requests that outlive their prediction get a virtual extension
of ``ceil(0.2 * D_current)`` iterations, repeated until they finish.

Values are stored as token counts in a ring buffer indexed by absolute
iteration and divided by the capacity ``M`` on read.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Hashable, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

EXTENSION_FRACTION = 0.2
DEFAULT_HORIZON = 100


@dataclass
class Projection:
    """Ledger entry for one tracked request."""

    admitted_at: int
    prompt: int
    predicted: int  # current projected total length, including virtual extensions
    extensions: int = 0

    @property
    def end(self) -> int:
        return self.admitted_at + self.predicted


class LookAheadMap:
    def __init__(self, capacity: int, length: int = 4096):
        if capacity <= 0 or length <= 0:
            raise ValueError("capacity and length must be positive")
        self.capacity = int(capacity)
        self.length = int(length)
        self.origin = 0
        self.ledger: Dict[Hashable, Projection] = {}
        self.early_corrections = 0
        self.late_extensions = 0
        self._buf = np.zeros(self.length)
        self._ar = np.arange(self.length)

    # -- internal helpers ---------------------------------------------------

    def _apply(self, proj: Projection, lo: int, hi: int, sign: float) -> None:
        """Add ``sign * (P + i)`` for request-relative indices ``i in [lo, hi)`` that lie in the window."""
        lo = max(lo, self.origin - proj.admitted_at)
        hi = min(hi, self.origin + self.length - proj.admitted_at)
        if hi <= lo:
            return
        i = self._ar[: hi - lo] + lo
        slots = (proj.admitted_at + i) % self.length
        self._buf[slots] += sign * (proj.prompt + i)

    def _window(self, horizon: int) -> np.ndarray:
        if horizon > self.length:
            raise ValueError(f"horizon {horizon} exceeds map length {self.length}")
        return self._buf[(self.origin + self._ar[:horizon]) % self.length]

    # -- mutations ------------------------------------------------------------

    def admit(self, rid: Hashable, prompt: int, predicted: int) -> None:
        if predicted < 1:
            raise ValueError("predicted length must be >= 1")
        if rid in self.ledger:
            raise KeyError(f"request {rid!r} already tracked")
        if predicted > self.length:
            logger.warning("predicted length %d clamped to map length %d", predicted, self.length)
            predicted = self.length
        proj = Projection(self.origin, int(prompt), int(predicted))
        self.ledger[rid] = proj
        self._apply(proj, 0, proj.predicted, 1.0)

    def correct_early(self, rid: Hashable, actual: int) -> bool:
        """Request finished after ``actual`` iterations; drop its tail ``[actual, D)``.

        Returns True when a non-empty range was subtracted.
        """
        proj = self.ledger.pop(rid)
        if actual < proj.predicted:
            self._apply(proj, actual, proj.predicted, -1.0)
            self.early_corrections += 1
            return True
        return False

    complete = correct_early

    def extend_late(self, rid: Hashable) -> int:
        """Virtually extend a request whose projection is exhausted; returns the extension size."""
        proj = self.ledger[rid]
        ext = math.ceil(EXTENSION_FRACTION * proj.predicted)
        room = self.origin + self.length - proj.end
        ext = max(0, min(ext, room))
        if ext:
            self._apply(proj, proj.predicted, proj.predicted + ext, 1.0)
            proj.predicted += ext
            proj.extensions += 1
            self.late_extensions += 1
        return ext

    def evict(self, rid: Hashable) -> None:
        """Remove every future contribution of a request (preemption)."""
        proj = self.ledger.pop(rid)
        self._apply(proj, 0, proj.predicted, -1.0)

    def advance(self, iterations: int = 1) -> None:
        """Move the origin forward; still-tracked requests whose projection ran out are extended."""
        if iterations < 1:
            raise ValueError("advance needs a positive iteration count")
        n = min(iterations, self.length)
        self._buf[(self.origin + self._ar[:n]) % self.length] = 0.0
        self.origin += iterations
        for rid, proj in self.ledger.items():
            while proj.end <= self.origin:
                if not self.extend_late(rid):
                    break

    def advance_time(self, elapsed: float, iteration_latency: float) -> int:
        """Advance by the number of iterations an idle instance would have run in ``elapsed`` seconds."""
        if iteration_latency <= 0:
            return 0
        n = int(math.floor(elapsed / iteration_latency + 1e-9))
        if n:
            self.advance(n)
        return n

    # -- queries ----------------------------------------------------------------

    def usage(self, horizon: Optional[int] = None) -> np.ndarray:
        """Fractional usage ``U`` for the next ``horizon`` iterations (default: whole map)."""
        return self._window(self.length if horizon is None else horizon) / self.capacity

    def _with_virtual(self, horizon: int, virtual) -> np.ndarray:
        """Window plus requests admitted now without touching the map.

        ``virtual`` is one ``(prompt, predicted)`` pair or a list of them.
        """
        w = self._window(horizon).copy()
        if virtual is None:
            return w
        if len(virtual) == 2 and not isinstance(virtual[0], (tuple, list)):
            virtual = [virtual]
        for p, d in virtual:
            d = min(int(d), horizon)
            w[:d] += p + self._ar[:d]
        return w

    def peek_peak(self, horizon: int = DEFAULT_HORIZON, virtual=None) -> float:
        """Peak fractional usage over the next ``horizon`` iterations, optionally with a virtual request."""
        if horizon < 1:
            return 0.0
        return float(self._with_virtual(horizon, virtual).max()) / self.capacity

    def overload_fraction(
        self,
        horizon: int = DEFAULT_HORIZON,
        threshold: float = 0.95,
        virtual=None,
    ) -> float:
        """Fraction of the next ``horizon`` iterations whose usage strictly exceeds ``threshold``."""
        if horizon < 1:
            return 0.0
        w = self._with_virtual(horizon, virtual)
        return float(np.count_nonzero(w > threshold * self.capacity)) / horizon

    def __len__(self) -> int:
        return len(self.ledger)


def recompute(ledger: Dict[Hashable, Projection], origin: int, length: int, capacity: int) -> np.ndarray:
    """Brute-force fractional usage rebuilt from scratch from a request ledger."""
    out = [0.0] * length
    for proj in ledger.values():
        for i in range(proj.predicted):
            j = proj.admitted_at + i - origin
            if 0 <= j < length:
                out[j] += proj.prompt + i
    return np.array(out) / capacity
