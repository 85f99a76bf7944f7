"""Signal controllers: map a simulation state to nine phase requests."""

from __future__ import annotations

import numpy as np

from .grid import N_PHASES
from .microsim import SimState
from .observe import ObsConfig, encode_observations
from .policy import DensePolicy, greedy_phase, sample_phase


class Controller:
    label = "controller"

    def act(self, state: SimState) -> np.ndarray:
        raise NotImplementedError


class PolicyController(Controller):
    """Shared-parameter policy applied to each intersection's observation."""

    def __init__(self, policy: DensePolicy, rng: np.random.Generator | None = None,
                 mode: str = "greedy", obs_cfg: ObsConfig = ObsConfig(),
                 label: str = "policy"):
        if mode not in ("greedy", "sample"):
            raise ValueError("mode must be greedy or sample")
        if mode == "sample" and rng is None:
            raise ValueError("sampling needs an rng")
        self.policy, self.rng, self.mode, self.obs_cfg = policy, rng, mode, obs_cfg
        self.label = label

    def act(self, state: SimState) -> np.ndarray:
        obs = encode_observations(state, self.obs_cfg)
        if self.mode == "greedy":
            return greedy_phase(self.policy, obs)
        return sample_phase(self.policy, obs, self.rng)[0]


class RandomController(Controller):
    """Uniform random phase request at every intersection every second."""

    label = "random"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def act(self, state: SimState) -> np.ndarray:
        return self.rng.integers(N_PHASES, size=len(state.signals))


class FixedCycleController(Controller):
    """Alternate phases 0 (N-S through) and 1 (E-W through), ``cycle`` s each."""

    label = "fixed"

    def __init__(self, cycle: int = 30, phases=(0, 1)):
        if cycle <= 0:
            raise ValueError("cycle must be positive")
        self.cycle, self.phases = int(cycle), tuple(phases)

    def act(self, state: SimState) -> np.ndarray:
        k = (state.clock // self.cycle) % len(self.phases)
        return np.full(len(state.signals), self.phases[k])
