"""Runtime checks of the signal safety contract.

A :class:`SafetyMonitor` wraps :meth:`SimState.step` and counts

* ``conflict``: an effective green set containing a conflicting pair;
* ``red_crossing``: a vehicle crossing a stop line whose movement was not
  effectively green that second;
* ``clearance``: a movement turning green fewer than ``CLEARANCE_S`` red
  seconds after a conflicting movement last had green.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import CLEARANCE_S, CONFLICTS
from .microsim import SimState

_BIT = np.arange(8)


@dataclass
class Violations:
    conflict: int = 0
    red_crossing: int = 0
    clearance: int = 0

    @property
    def total(self) -> int:
        return self.conflict + self.red_crossing + self.clearance


class SafetyMonitor:
    def __init__(self, state: SimState):
        self.state = state
        self.violations = Violations()
        n = len(state.signals)
        # second at which each movement was last effectively green
        self.last_green = np.full((n, 8), -10**9, dtype=np.int64)
        self.was_green = np.zeros((n, 8), dtype=bool)
        self.crossings = 0

    def step(self, actions) -> None:
        s = self.state
        vid0, ridx0, route0, edge0 = s.vid.copy(), s.ridx.copy(), s.route.copy(), s.edge.copy()
        t = s.clock
        s.step(actions)
        green = ((s.green_masks[:, None] >> _BIT) & 1).astype(bool)  # (9, 8)

        for g in green:
            idx = np.flatnonzero(g)
            if CONFLICTS[np.ix_(idx, idx)].any():
                self.violations.conflict += 1

        # movements switching on: every conflicting movement needs a red gap
        onset = green & ~self.was_green
        for i, m in zip(*np.nonzero(onset)):
            rivals = np.flatnonzero(CONFLICTS[m])
            if (t - self.last_green[i, rivals] <= CLEARANCE_S).any():
                self.violations.clearance += 1
        self.last_green[green] = t
        self.was_green = green

        # vehicles that advanced to their next route edge crossed a stop line
        pos_of = {int(v): j for j, v in enumerate(s.vid)}
        for j in range(vid0.size):
            k = pos_of.get(int(vid0[j]))
            if k is None or s.ridx[k] == ridx0[j]:
                continue
            self.crossings += 1
            node = s.edge_head[edge0[j]]
            move = s.routes.move[route0[j], ridx0[j]]
            if node < 0 or move < 0 or not green[node, move]:
                self.violations.red_crossing += 1


def random_policy_rollout(seed: int, seconds: int, demand=None) -> tuple[Violations, int]:
    """Uniform random phase requests for ``seconds``; returns the violation
    counts and the number of stop-line crossings observed."""
    from .demand import make_even_demand

    state = SimState(seed, demand=demand or make_even_demand())
    mon = SafetyMonitor(state)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    for _ in range(seconds):
        mon.step(rng.integers(8, size=9))
    return mon.violations, mon.crossings
