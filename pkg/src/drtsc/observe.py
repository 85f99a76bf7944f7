"""Observation encoders and rewards for the signal agents and the demand
estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .microsim import STOP_SPEED, SimState

N_INTERSECTIONS = 9
TL_OBS_DIM = 79
WCE_OBS_DIM = 18
_MOVEMENT_ID = np.tile([0.0, 1.0], 4)


@dataclass(frozen=True)
class ObsConfig:
    detection_range: float = 100.0
    time_cap: float = 120.0
    queue_norm: float = 10.0  # vehicles giving a queue fraction of 1
    reward_queue_cap: float = 40.0


@dataclass(frozen=True)
class RewardWeights:
    kappa_s: float = 1.0
    kappa_q: float = 1.0

    def __post_init__(self):
        if self.kappa_s < 0 or self.kappa_q < 0:
            raise ValueError("reward weights must be non-negative")


def _signal_features(state: SimState, cfg: ObsConfig) -> np.ndarray:
    sig = np.array(
        [
            [min(s.time_since_change / cfg.time_cap, 1.0), s.target_phase / 7.0,
             float(s.in_clearance)]
            for s in state.signals
        ]
    )
    nb = state.network.neighbors  # (9, 4) in N, S, E, W order
    padded = np.vstack([sig, np.zeros((1, 3))])
    blocks = padded[np.where(nb < 0, N_INTERSECTIONS, nb)]  # (9, 4, 3)
    return np.concatenate([sig, blocks.reshape(N_INTERSECTIONS, 12)], axis=1)


def encode_observations(state: SimState, cfg: ObsConfig = ObsConfig()) -> np.ndarray:
    """All nine 79-dim agent observations, shape ``(9, 79)``.

    Per movement (N-SR, N-LT, S-SR, ..., W-LT): movement id, distance and
    speed of the closest and second-closest vehicle to the stop line, lane
    density, mean speed, queue fraction.  Then time since change, phase
    and clearance flag for the intersection and its N/S/E/W neighbours.
    """
    sim = state.config
    D = cfg.detection_range
    node = state.edge_head[state.edge]
    dist = state.edge_len[state.edge] - state.pos
    sel = (node >= 0) & (dist <= D)
    g = (node[sel] * 8 + state.edge_approach[state.edge[sel]] * 2
         + (state.lane[sel] >= 2))
    d, v = dist[sel], state.speed[sel]
    n_groups = N_INTERSECTIONS * 8

    feat = np.zeros((n_groups, 8))
    feat[:, 0] = np.tile(_MOVEMENT_ID, N_INTERSECTIONS)
    feat[:, 1] = 1.0
    feat[:, 3] = 1.0
    if g.size:
        order = np.lexsort((d, g))
        gs, ds, vs = g[order], d[order], v[order]
        first = np.ones(gs.size, dtype=bool)
        first[1:] = gs[1:] != gs[:-1]
        i1 = np.flatnonzero(first)
        feat[gs[i1], 1] = ds[i1] / D
        feat[gs[i1], 2] = vs[i1] / sim.v_max
        i2 = i1 + 1
        i2 = i2[(i2 < gs.size)]
        i2 = i2[~first[i2]]
        feat[gs[i2], 3] = ds[i2] / D
        feat[gs[i2], 4] = vs[i2] / sim.v_max
        count = np.bincount(g, minlength=n_groups)
        jam = 2.0 * D / (sim.vehicle_length + sim.min_gap)
        feat[:, 5] = np.minimum(count / jam, 1.0)
        speed_sum = np.bincount(g, weights=v, minlength=n_groups)
        with np.errstate(invalid="ignore", divide="ignore"):
            feat[:, 6] = np.where(count > 0, speed_sum / count / sim.v_max, 0.0)
        stopped = np.bincount(g, weights=v < STOP_SPEED, minlength=n_groups)
        feat[:, 7] = np.minimum(stopped / cfg.queue_norm, 1.0)
    traffic = feat.reshape(N_INTERSECTIONS, 64)
    obs = np.concatenate([traffic, _signal_features(state, cfg)], axis=1)
    return np.clip(obs, 0.0, 1.0)


def encode_tl_observation(state: SimState, intersection: int,
                          cfg: ObsConfig = ObsConfig()) -> np.ndarray:
    if not 0 <= intersection < N_INTERSECTIONS:
        raise ValueError(f"intersection must be in 0..8, got {intersection}")
    return encode_observations(state, cfg)[intersection]


def local_rewards(state: SimState, weights: RewardWeights = RewardWeights(),
                  cfg: ObsConfig = ObsConfig()) -> np.ndarray:
    """``kappa_s * s_i - kappa_q * q_i`` for all nine intersections."""
    count, speed_sum, stopped = state.incoming_stats()
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(count > 0, speed_sum / count / state.config.v_max, 1.0)
    q = np.minimum(stopped / cfg.reward_queue_cap, 1.0)
    return weights.kappa_s * s - weights.kappa_q * q


def local_reward(state: SimState, intersection: int,
                 weights: RewardWeights = RewardWeights(),
                 cfg: ObsConfig = ObsConfig()) -> float:
    return float(local_rewards(state, weights, cfg)[intersection])


def team_reward(state: SimState, weights: RewardWeights = RewardWeights(),
                cfg: ObsConfig = ObsConfig()) -> float:
    return float(local_rewards(state, weights, cfg).sum())


class WindowStats:
    """Per-second sums of speed and vehicle count on each intersection's
    incoming edges, plus the network queue series, over one window."""

    def __init__(self):
        self.speed_sum = np.zeros(N_INTERSECTIONS)
        self.count = np.zeros(N_INTERSECTIONS)
        self.seconds = 0
        self.queue_series: list[int] = []

    def update(self, state: SimState) -> None:
        count, speed_sum, _ = state.incoming_stats()
        self.count += count
        self.speed_sum += speed_sum
        self.seconds += 1
        self.queue_series.append(state.queue_count())


def encode_wce_observation(stats: WindowStats, v_max: float = 13.9,
                           link_length: float = 100.0, vehicle_length: float = 5.0,
                           min_gap: float = 2.0) -> np.ndarray:
    """(mean speed / v_max, mean density / jam density) per intersection."""
    jam = 16.0 * link_length / (vehicle_length + min_gap)  # 4 approaches x 4 lanes
    with np.errstate(invalid="ignore", divide="ignore"):
        speed = np.where(stats.count > 0, stats.speed_sum / stats.count / v_max, 1.0)
    if stats.seconds:
        density = stats.count / stats.seconds / jam
    else:
        density = np.zeros(N_INTERSECTIONS)
    out = np.stack([speed, density], axis=1).reshape(WCE_OBS_DIM)
    return np.clip(out, 0.0, 1.0)


def window_waiting_time(queue_series, window: int | None = None) -> float:
    """Vehicle-seconds spent queued over the window (sum of per-second queue
    counts)."""
    series = np.asarray(queue_series, dtype=float)
    if window is not None and series.size != window:
        raise ValueError(f"queue series has {series.size} entries, window is {window}")
    return float(series.sum())
