"""Training drivers: the baseline signal policy on even demand, the
worst-case demand estimator against a frozen signal policy, and
distributionally robust fine-tuning under estimator-scheduled demand."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig, TrainConfig
from .controllers import PolicyController
from .demand import K_SCENARIOS, ODMatrix, ScenarioSet, make_even_demand, mix
from .microsim import SimState
from .observe import (
    TL_OBS_DIM,
    WCE_OBS_DIM,
    WindowStats,
    encode_observations,
    encode_wce_observation,
    local_rewards,
    window_waiting_time,
)
from .policy import (
    DensePolicy,
    clipped_surrogate_grad,
    entropy_grad,
    make_optimizer,
    normalize_rewards,
    sample_phase,
    sample_weights,
    save_policy,
    weighted_grad_logprob,
)

N_AGENTS = 9
# stream tags keep seeds of different drivers apart
_TAG_BASELINE, _TAG_WCE, _TAG_DR = 1, 2, 3


# --------------------------------------------------------------------------
# records and buffers


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray


@dataclass(frozen=True)
class WceTransition:
    obs: np.ndarray
    weights: np.ndarray
    reward: float
    next_obs: np.ndarray


class ReplayBuffer:
    """FIFO buffer of fixed-width records stored column-wise.

    ``columns`` maps a field name to its per-record shape.  Once full, the
    oldest records are evicted first.
    """

    def __init__(self, capacity: int, columns: dict[str, tuple]):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.columns = dict(columns)
        self._data = {k: np.zeros((self.capacity,) + tuple(s)) for k, s in columns.items()}
        self._start = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add_batch(self, **cols) -> None:
        n = len(next(iter(cols.values())))
        if set(cols) != set(self.columns):
            raise ValueError(f"expected columns {sorted(self.columns)}")
        if any(len(v) != n for v in cols.values()):
            raise ValueError("columns have different lengths")
        if n >= self.capacity:
            for k, v in cols.items():
                self._data[k][:] = np.asarray(v)[n - self.capacity:]
            self._start, self._size = 0, self.capacity
            return
        end = self._start + self._size
        idx = (end + np.arange(n)) % self.capacity
        for k, v in cols.items():
            self._data[k][idx] = v
        overflow = max(0, self._size + n - self.capacity)
        self._start = (self._start + overflow) % self.capacity
        self._size = min(self.capacity, self._size + n)

    def add(self, record) -> None:
        self.add_batch(**{k: [getattr(record, k)] for k in self.columns})

    def _ordered(self) -> np.ndarray:
        return (self._start + np.arange(self._size)) % self.capacity

    def column(self, name: str) -> np.ndarray:
        """Records in insertion order (oldest first)."""
        return self._data[name][self._ordered()]

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Uniform draw without replacement; the whole buffer if
        ``batch_size`` is 0 or not smaller than the buffer."""
        if self._size == 0:
            raise ValueError("cannot sample an empty buffer")
        order = self._ordered()
        if batch_size and batch_size < self._size:
            order = order[rng.choice(self._size, size=batch_size, replace=False)]
        return {k: v[order] for k, v in self._data.items()}


def phase_buffer(capacity: int, obs_dim: int = TL_OBS_DIM) -> ReplayBuffer:
    return ReplayBuffer(capacity, {"obs": (obs_dim,), "action": (), "reward": (),
                                   "next_obs": (obs_dim,), "logp": ()})


def wce_buffer(capacity: int) -> ReplayBuffer:
    return ReplayBuffer(capacity, {"obs": (WCE_OBS_DIM,), "weights": (K_SCENARIOS,),
                                   "reward": (), "next_obs": (WCE_OBS_DIM,)})


# --------------------------------------------------------------------------
# seeding and logging


def _seeds(seed: int, tag: int, iteration: int, rollout: int) -> tuple[int, np.random.Generator]:
    """Simulation seed and action-sampling rng for one rollout."""
    ss = np.random.SeedSequence([seed, tag, iteration, rollout])
    sim_ss, act_ss = ss.spawn(2)
    return int(sim_ss.generate_state(1, dtype=np.uint64)[0]), np.random.default_rng(act_ss)


class CurveLog:
    """Training-curve records, optionally mirrored to a JSONL file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")
        self._t0 = time.perf_counter()

    def write(self, **rec) -> None:
        rec["wall_time"] = round(time.perf_counter() - self._t0, 3)
        self.records.append(rec)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")


def _checkpoint(policy: DensePolicy, out_dir, name: str, it: int, every: int,
                final: bool) -> None:
    if not out_dir:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if final:
        save_policy(policy, out / f"{name}.bin")
    elif every and (it + 1) % every == 0:
        save_policy(policy, out / f"{name}_it{it + 1:04d}.bin")


# --------------------------------------------------------------------------
# rollouts


@dataclass
class Segment:
    """Per-second record of one controlled stretch of simulation."""

    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    rewards: list = field(default_factory=list)  # (9,) local rewards per second
    queue: list = field(default_factory=list)
    speed: list = field(default_factory=list)


def _run(state: SimState, seconds: int, cfg: RunConfig, policy: DensePolicy,
         rng: np.random.Generator, record: Segment | None = None,
         stats: WindowStats | None = None) -> None:
    """Advance ``seconds`` with phases sampled from ``policy``."""
    for _ in range(seconds):
        obs = encode_observations(state, cfg.obs)
        actions, lp = sample_phase(policy, obs, rng)
        state.step(actions)
        if stats is not None:
            stats.update(state)
        if record is not None:
            record.obs.append(obs)
            record.actions.append(actions)
            record.logp.append(lp)
            record.rewards.append(local_rewards(state, cfg.reward, cfg.obs))
            record.queue.append(state.queue_count())
            record.speed.append(state.mean_speed())


def warmup(state: SimState, scenarios: ScenarioSet, rng: np.random.Generator,
           duration: int, act: Callable[[SimState], np.ndarray],
           stats: WindowStats | None = None) -> SimState:
    """Run ``duration`` s under one symmetric-Dirichlet mixture of the
    scenarios while ``act`` drives the signals.  No transitions are
    recorded; ``stats`` (if given) collects the first window's context."""
    if duration < 0:
        raise ValueError("warm-up duration must be non-negative")
    if duration == 0:
        return state
    state.set_demand(mix(rng.dirichlet(np.ones(len(scenarios))), scenarios))
    for _ in range(duration):
        state.step(act(state))
        if stats is not None:
            stats.update(state)
    return state


def _learning_signal(rewards: np.ndarray, tc: TrainConfig) -> np.ndarray:
    """Per-record coefficients for the score-function update.

    ``rewards`` has shape (rollouts, T, 9) of local rewards.  Team credit
    gives every agent the summed reward; ``discounted`` replaces r_t by the
    discounted reward-to-go; the ``time`` baseline subtracts, at each
    (t, agent), the mean over the iteration's rollouts.  The result is
    normalized over the whole batch.
    """
    r = rewards
    if tc.credit == "team":
        r = np.repeat(r.sum(axis=2, keepdims=True), r.shape[2], axis=2)
    if tc.return_mode == "discounted":
        g = np.empty_like(r)
        acc = np.zeros(r.shape[::2])
        for t in range(r.shape[1] - 1, -1, -1):
            acc = r[:, t] + tc.gamma_return * acc
            g[:, t] = acc
        r = g
    if tc.baseline == "time" and r.shape[0] > 1:
        r = r - r.mean(axis=0, keepdims=True)
    return r


def _policy_step(policy: DensePolicy, opt, batch: dict, tc: TrainConfig,
                 rng: np.random.Generator | None = None) -> DensePolicy:
    """``tc.epochs`` passes over ``batch`` in minibatches of ``tc.minibatch``
    records (0: the whole batch), one optimizer step per minibatch."""
    coef = normalize_rewards(batch["reward"])
    actions = batch["action"].astype(np.int64)
    n = len(coef)
    size = tc.minibatch if 0 < tc.minibatch < n else n

    def grad(p, idx):
        obs = batch["obs"][idx]
        if tc.surrogate == "clip":
            g = clipped_surrogate_grad(p, obs, actions[idx], coef[idx], batch["logp"][idx],
                                       tc.clip)
        else:
            g = weighted_grad_logprob(p, obs, actions[idx], coef[idx] / len(idx))
        if tc.entropy_coef:
            g = g + tc.entropy_coef * entropy_grad(p, obs)[1]
        return g

    for _ in range(tc.epochs):
        order = rng.permutation(n) if rng is not None and size < n else np.arange(n)
        for start in range(0, n - size + 1, size):
            policy = opt.step(policy, grad(policy, order[start:start + size]))
    return policy


def _store_segments(buf: ReplayBuffer, segs: list[Segment], signal: np.ndarray,
                    next_obs_last: list[np.ndarray]) -> int:
    """Flatten per-agent records of every segment into ``buf``."""
    n = 0
    for seg, sig, last in zip(segs, signal, next_obs_last):
        obs = np.stack(seg.obs)  # (T, 9, D)
        nxt = np.concatenate([obs[1:], last[None]], axis=0)
        buf.add_batch(
            obs=obs.reshape(-1, obs.shape[-1]),
            action=np.stack(seg.actions).reshape(-1),
            reward=sig.reshape(-1),
            next_obs=nxt.reshape(-1, obs.shape[-1]),
            logp=np.stack(seg.logp).reshape(-1),
        )
        n += obs.shape[0] * obs.shape[1]
    return n


# --------------------------------------------------------------------------
# drivers


@dataclass
class TrainResult:
    policy: DensePolicy
    curve: list[dict]
    weights_log: list = field(default_factory=list)


def train_baseline(cfg: RunConfig, policy: DensePolicy | None = None, out_dir=None,
                   demand: ODMatrix | None = None, log_path=None) -> TrainResult:
    """Shared-parameter signal policy trained on the even demand pattern."""
    from .policy import phase_policy

    tc = cfg.baseline.validate()
    policy = policy if policy is not None else phase_policy(np.random.default_rng(tc.seed))
    demand = demand or make_even_demand()
    opt = make_optimizer(tc.optimizer, tc.learning_rate)
    per_iter = tc.horizon * tc.rollouts * N_AGENTS
    buf = phase_buffer(tc.buffer_capacity or per_iter)
    batch_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, _TAG_BASELINE, 2**31]))
    log = CurveLog(log_path)
    for it in range(tc.iterations):
        segs, lasts, returns = [], [], []
        for k in range(tc.rollouts):
            sim_seed, rng = _seeds(tc.seed, _TAG_BASELINE, it, k)
            state = SimState(sim_seed, cfg.sim, cfg.link_length, demand)
            seg = Segment()
            _run(state, tc.horizon, cfg, policy, rng, record=seg)
            segs.append(seg)
            lasts.append(encode_observations(state, cfg.obs))
            returns.append(float(np.sum(seg.rewards)))
        signal = _learning_signal(np.array([s.rewards for s in segs]), tc)
        added = _store_segments(buf, segs, signal, lasts)
        policy = _policy_step(policy, opt, buf.sample(tc.batch_size, batch_rng), tc, batch_rng)
        log.write(iteration=it, records=added, mean_return=float(np.mean(returns)),
                  mean_queue=float(np.mean([s.queue for s in segs])),
                  mean_speed=float(np.mean([s.speed for s in segs])))
        _checkpoint(policy, out_dir, "baseline", it, tc.checkpoint_every, False)
    _checkpoint(policy, out_dir, "baseline", tc.iterations, 0, True)
    return TrainResult(policy, log.records)


def window_obs(stats: WindowStats, cfg: RunConfig) -> np.ndarray:
    return encode_wce_observation(stats, cfg.sim.v_max, cfg.link_length,
                                  cfg.sim.vehicle_length, cfg.sim.min_gap)


def _affine(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))])


def context_baseline(obs: np.ndarray, rewards: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """Ridge-regression coefficients predicting a window's reward from its
    context; subtracting the prediction removes the part of the reward that
    the congestion state, not the chosen mixture, explains."""
    x = _affine(np.asarray(obs, dtype=np.float64))
    a = x.T @ x + ridge * len(x) * np.eye(x.shape[1])
    return np.linalg.solve(a, x.T @ np.asarray(rewards, dtype=np.float64))


def train_wce(cfg: RunConfig, theta: DensePolicy, scenarios: ScenarioSet,
              psi: DensePolicy | None = None, out_dir=None, log_path=None) -> TrainResult:
    """Contextual-bandit estimator of demand mixtures that maximize the
    frozen signal policy's window waiting time."""
    from .policy import mixture_policy

    tc = cfg.wce.validate(windowed=True)
    psi = psi if psi is not None else mixture_policy(np.random.default_rng(tc.seed + 1))
    theta_params = theta.params.copy()
    opt = make_optimizer(tc.optimizer, tc.learning_rate)
    buf = wce_buffer(tc.buffer_capacity or 256)
    batch_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, _TAG_WCE, 2**31]))
    n_windows = tc.horizon // tc.window
    log = CurveLog(log_path)
    weights_log = []
    for it in range(tc.iterations):
        rewards, queues, speeds = [], [], []
        for k in range(tc.rollouts):
            sim_seed, rng = _seeds(tc.seed, _TAG_WCE, it, k)
            state = SimState(sim_seed, cfg.sim, cfg.link_length)
            ctrl = PolicyController(theta, rng, cfg.eval.mode, cfg.obs)
            stats = WindowStats()
            warmup(state, scenarios, rng, tc.warmup, ctrl.act, stats)
            for tau in range(n_windows):
                x = window_obs(stats, cfg)
                w, _ = sample_weights(psi, x, rng)
                weights_log.append((it, k, tau, w.tolist()))
                state.set_demand(mix(w, scenarios))
                stats = WindowStats()
                for _ in range(tc.window):
                    state.step(ctrl.act(state))
                    stats.update(state)
                r = window_waiting_time(stats.queue_series, tc.window)
                buf.add(WceTransition(x, w, r, window_obs(stats, cfg)))
                rewards.append(r)
                queues.append(np.mean(stats.queue_series))
                speeds.append(state.mean_speed())
        beta = context_baseline(buf.column("obs"), buf.column("reward")) \
            if tc.baseline == "context" else None
        for _ in range(tc.epochs):
            batch = buf.sample(tc.batch_size, batch_rng)
            adv = batch["reward"]
            if beta is not None:
                adv = adv - _affine(batch["obs"]) @ beta
            coef = normalize_rewards(adv) / len(adv)
            psi = opt.step(psi, weighted_grad_logprob(psi, batch["obs"], batch["weights"], coef))
        log.write(iteration=it, records=tc.rollouts * n_windows,
                  mean_return=float(np.mean(rewards)), mean_queue=float(np.mean(queues)),
                  mean_speed=float(np.mean(speeds)))
        _checkpoint(psi, out_dir, "wce", it, tc.checkpoint_every, False)
    if not np.array_equal(theta.params, theta_params):
        raise RuntimeError("signal policy changed during estimator training")
    _checkpoint(psi, out_dir, "wce", tc.iterations, 0, True)
    return TrainResult(psi, log.records, weights_log)


Scheduler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def estimator_scheduler(psi: DensePolicy) -> Scheduler:
    """Demand schedule drawn from a frozen estimator policy."""
    def schedule(x, rng):
        return sample_weights(psi, x, rng)[0]

    return schedule


def train_drmarl(cfg: RunConfig, theta0: DensePolicy, schedule: DensePolicy | Scheduler,
                 scenarios: ScenarioSet, out_dir=None, log_path=None) -> TrainResult:
    """Fine-tune ``theta0`` under window-wise mixtures chosen by a frozen
    estimator (or any scheduler ``(context, rng) -> weights``)."""
    tc = cfg.drmarl.validate(windowed=True)
    psi_params = None
    if isinstance(schedule, DensePolicy):
        psi_params = schedule.params.copy()
        psi = schedule
        schedule = estimator_scheduler(psi)
    policy = theta0.copy()
    opt = make_optimizer(tc.optimizer, tc.learning_rate)
    per_iter = tc.horizon * tc.rollouts * N_AGENTS
    buf = phase_buffer(tc.buffer_capacity or per_iter)
    batch_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, _TAG_DR, 2**31]))
    n_windows = tc.horizon // tc.window
    log = CurveLog(log_path)
    weights_log = []
    for it in range(tc.iterations):
        segs, lasts, returns = [], [], []
        for k in range(tc.rollouts):
            sim_seed, rng = _seeds(tc.seed, _TAG_DR, it, k)
            state = SimState(sim_seed, cfg.sim, cfg.link_length)
            ctrl = PolicyController(policy, rng, "sample", cfg.obs)
            stats = WindowStats()
            warmup(state, scenarios, rng, tc.warmup, ctrl.act, stats)
            seg = Segment()
            for tau in range(n_windows):
                w = np.asarray(schedule(window_obs(stats, cfg), rng), dtype=np.float64)
                weights_log.append((it, k, tau, w.tolist()))
                state.set_demand(mix(w, scenarios))
                stats = WindowStats()
                _run(state, tc.window, cfg, policy, rng, record=seg, stats=stats)
            segs.append(seg)
            lasts.append(encode_observations(state, cfg.obs))
            returns.append(float(np.sum(seg.rewards)))
        signal = _learning_signal(np.array([s.rewards for s in segs]), tc)
        added = _store_segments(buf, segs, signal, lasts)
        policy = _policy_step(policy, opt, buf.sample(tc.batch_size, batch_rng), tc, batch_rng)
        log.write(iteration=it, records=added, mean_return=float(np.mean(returns)),
                  mean_queue=float(np.mean([s.queue for s in segs])),
                  mean_speed=float(np.mean([s.speed for s in segs])))
        _checkpoint(policy, out_dir, "drmarl", it, tc.checkpoint_every, False)
    if psi_params is not None and not np.array_equal(psi.params, psi_params):
        raise RuntimeError("estimator changed during robust fine-tuning")
    _checkpoint(policy, out_dir, "drmarl", tc.iterations, 0, True)
    return TrainResult(policy, log.records, weights_log)
