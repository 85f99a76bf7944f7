"""Fast invariant suite behind the ``selftest`` subcommand.

Each check returns ``None`` on success or a failure message.  The sample
sizes are small; the test suite runs the full-size versions.
"""

from __future__ import annotations

import numpy as np

from . import policy as P
from .demand import K_SCENARIOS, make_scenario_set, mix
from .grid import PHASE_MASKS, mask_conflict_free
from .microsim import SimState
from .observe import WindowStats, encode_observations, encode_wce_observation
from .safety import random_policy_rollout


def _check_phases():
    bad = [k for k, m in enumerate(PHASE_MASKS) if not mask_conflict_free(m)]
    return f"phases {bad} contain conflicting movements" if bad else None


def _check_safety(n=3, seconds=300):
    for seed in range(n):
        v, _ = random_policy_rollout(seed, seconds)
        if v.total:
            return f"safety violations on seed {seed}: {v}"
    return None


def _check_conservation(seconds=300):
    s = SimState(5, demand=make_scenario_set(0)[3])
    rng = np.random.default_rng(0)
    for _ in range(seconds):
        s.step(rng.integers(8, size=9))
    c = s.counters()
    if c["spawned"] != c["arrived"] + c["in_network"] + c["backlogged"]:
        return f"vehicle conservation broken: {c}"
    return None


def _check_mixture(n=100):
    sc = make_scenario_set(0)
    rng = np.random.default_rng(1)
    for k in range(K_SCENARIOS):
        if abs(sc[k].total() - 5000.0) > 1e-6:
            return f"scenario {k} totals {sc[k].total()}"
    for _ in range(n):
        w = rng.dirichlet(np.ones(K_SCENARIOS))
        if abs(mix(w, sc).total() - 5000.0) > 1e-6:
            return "mixture total drifted from 5000"
    return None


def _check_gradients(n=5, h=1e-5):
    rng = np.random.default_rng(2)
    for head, sizes in ((P.CATEGORICAL, [6, 5, 8]), (P.DIRICHLET, [4, 5, 8])):
        for _ in range(n):
            pol = P.init_policy(sizes, head, rng)
            x = rng.random(sizes[0])
            tgt = rng.integers(8) if head == P.CATEGORICAL else rng.dirichlet(np.ones(8))
            g = P.grad_logprob(pol, x, tgt)
            k = rng.integers(len(g))
            up, dn = pol.copy(), pol.copy()
            up.params[k] += h
            dn.params[k] -= h
            fd = (P.logprob(up, x, [tgt])[0] - P.logprob(dn, x, [tgt])[0]) / (2 * h)
            if abs(fd - g[k]) > 1e-4 * max(1.0, abs(fd)):
                return f"{head} gradient mismatch at param {k}: {g[k]} vs {fd}"
    return None


def _check_observations(seconds=200):
    s = SimState(3, demand=make_scenario_set(0)[7])
    rng = np.random.default_rng(3)
    stats = WindowStats()
    for _ in range(seconds):
        s.step(rng.integers(8, size=9))
        stats.update(s)
        o = encode_observations(s)
        if o.shape != (9, 79) or o.min() < 0 or o.max() > 1:
            return "signal observation out of contract"
    x = encode_wce_observation(stats)
    if x.shape != (18,) or x.min() < 0 or x.max() > 1:
        return "estimator observation out of contract"
    return None


CHECKS = {
    "phase catalogue": _check_phases,
    "safety": _check_safety,
    "conservation": _check_conservation,
    "mixture": _check_mixture,
    "gradients": _check_gradients,
    "observations": _check_observations,
}


def run_selftest() -> list[str]:
    """Names and messages of the failing checks (empty when all pass)."""
    failures = []
    for name, check in CHECKS.items():
        msg = check()
        if msg:
            failures.append(f"FAIL {name}: {msg}")
    return failures
