"""Counter-based random streams.

Every random quantity in a simulation is drawn from a Philox stream whose key
is ``(seed, kind)`` and whose counter is positioned at ``(step, lane)``.  A
stream is therefore a pure function of ``(seed, step, kind, lane)``: the order
in which a run asks for its draws, or how runs are spread across threads,
never changes the numbers an element receives.  Within one stream element
``e`` always gets the ``e``-th variate, so per-element draws are keyed by
element id as well.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

__all__ = ["Kind", "stream"]

_MASK64 = (1 << 64) - 1


class Kind(IntEnum):
    """Element kinds; each gets an independent stream family."""

    APPEAR = 1
    GROUP = 2
    WEIGHT = 3
    DELAY = 4
    EDGE_NOISE = 5
    SELF_NOISE = 6
    RING_LINKS = 7
    ARRIVAL_COUNT = 8
    ARRIVAL_WORK = 9
    INJECTION = 10
    PRODUCTIVITY = 11
    INITIAL = 12


def stream(seed: int, step: int, kind: int, lane: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, step, kind, lane)``.

    ``step`` may be negative (used for set-up draws that precede step 0).
    """
    key = np.array([seed & _MASK64, int(kind) & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, step & _MASK64, lane & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
