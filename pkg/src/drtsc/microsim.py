"""Seeded 1 s-step microscopic simulation of the signalized grid.

Vehicles are held column-wise in numpy arrays.  Each second:

1. every intersection receives its requested phase (:func:`request_phase`);
2. Poisson arrivals are drawn per OD pair and inserted at their origin's
   entry edge, or queued in a bounded per-origin backlog;
3. vehicles follow ``v' = min(v + a_max, v_max, v_safe)`` where
   ``v_safe = max(0, gap - min_gap)`` to the leader's rear or the stop line;
4. lane heads facing a green with room downstream cross onto the next
   route edge (lane chosen least-occupied among those valid for the next
   turn);
5. vehicles reaching the end of their exit edge leave the network;

and finally the signals tick.  Vehicles therefore move under the green set
that results from this second's requests, and a new phase is effective only
after five full seconds of clearance.

Randomness comes from two independent streams derived from the seed:
``SeedSequence(seed).spawn(2)`` gives the arrival stream and the route
tie-breaking stream, in that order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .demand import N_OUTER, ODMatrix
from .grid import (
    APPROACHES,
    CLASSES,
    OUTER_EDGE_IDS,
    TURN_LANES,
    Network,
    SignalState,
    build_grid,
    request_phase,
    tick_signal,
    turn_class,
)

STOP_SPEED = 0.1
_BIT = np.arange(8)


@dataclass(frozen=True)
class SimConfig:
    v_max: float = 13.9
    a_max: float = 2.5
    vehicle_length: float = 5.0
    min_gap: float = 2.0
    backlog_cap: int = 200


@dataclass(frozen=True)
class Vehicle:
    """Snapshot of one in-network vehicle."""

    id: int
    route: tuple[int, ...]
    route_index: int
    lane: int
    pos: float
    speed: float
    spawn_time: float
    od: tuple[str, str]

    @property
    def edge(self) -> int:
        return self.route[self.route_index]


class RouteTable:
    """Every minimum-edge-count route between distinct outer edges."""

    def __init__(self, net: Network):
        g = nx.DiGraph()
        g.add_nodes_from(range(len(net.edges)))
        for e, nxt in net.successors.items():
            g.add_edges_from((e, f) for f in nxt)
        routes, by_od, od_of = [], {}, []
        for i, o in enumerate(OUTER_EDGE_IDS):
            for j, d in enumerate(OUTER_EDGE_IDS):
                if i == j:
                    continue
                paths = sorted(
                    nx.all_shortest_paths(g, net.entry_edge[o], net.exit_edge[d])
                )
                by_od[i, j] = list(range(len(routes), len(routes) + len(paths)))
                routes.extend(paths)
                od_of.extend([(i, j)] * len(paths))
        width = max(map(len, routes))
        n = len(routes)
        self.paths = [tuple(p) for p in routes]
        self.by_od = by_od
        self.od = np.array(od_of, dtype=np.int64)
        self.edges = -np.ones((n, width), dtype=np.int64)
        self.length = np.array([len(p) for p in routes], dtype=np.int64)
        # movement index at the downstream end of route edge k, -1 on exit edges
        self.move = -np.ones((n, width), dtype=np.int64)
        # lanes a vehicle may occupy on route edge k (bitmask)
        self.lane_mask = np.zeros((n, width), dtype=np.int64)
        for r, p in enumerate(routes):
            self.edges[r, : len(p)] = p
            for k, e in enumerate(p):
                if k + 1 < len(p):
                    kind = net.turn(e, p[k + 1])
                    edge = net.edges[e]
                    self.move[r, k] = 2 * APPROACHES.index(edge.approach) + CLASSES.index(
                        turn_class(kind)
                    )
                    lanes = TURN_LANES[kind]
                else:
                    lanes = TURN_LANES["exit"]
                self.lane_mask[r, k] = sum(1 << l for l in lanes)

    def choose(self, o: int, d: int, rng: np.random.Generator) -> int:
        """Uniformly random minimum route id for ``o -> d``."""
        if o == d:
            raise ValueError("origin and destination coincide")
        try:
            options = self.by_od[o, d]
        except KeyError:
            raise ValueError(f"no route from {o} to {d}") from None
        return options[int(rng.integers(len(options)))]


_CACHE: dict = {}


def _topology(link_length: float):
    key = float(link_length)
    if key not in _CACHE:
        from .grid import GridSpec

        net = build_grid(GridSpec(link_length=key))
        _CACHE[key] = (net, RouteTable(net))
    return _CACHE[key]


def route_shortest(origin: str, dest: str, rng: np.random.Generator,
                   link_length: float = 100.0) -> list[str]:
    """A minimum-edge-count route as edge ids, ties broken uniformly."""
    if origin == dest:
        raise ValueError("origin and destination must differ")
    net, table = _topology(link_length)
    try:
        o, d = OUTER_EDGE_IDS.index(origin), OUTER_EDGE_IDS.index(dest)
    except ValueError:
        raise ValueError(f"unknown outer edge in {origin!r} -> {dest!r}") from None
    r = table.choose(o, d, rng)
    return [net.edges[e].id for e in table.paths[r]]


class SimState:
    """Mutable microscopic state of one simulation run (single owner)."""

    _COLS = ("vid", "edge", "lane", "pos", "speed", "route", "ridx", "spawn_t")

    def __init__(self, seed: int = 0, config: SimConfig | None = None,
                 link_length: float = 100.0, demand: ODMatrix | None = None):
        self.config = config or SimConfig()
        self.network, self.routes = _topology(link_length)
        net = self.network
        self.edge_len = np.array([e.length for e in net.edges])
        self.edge_head = np.array([-1 if e.head is None else e.head for e in net.edges])
        self.edge_approach = np.array([APPROACHES.index(e.approach) for e in net.edges])
        self.is_exit = np.array([e.kind == "exit" for e in net.edges])
        self.entry_edges = np.array([net.entry_edge[o] for o in OUTER_EDGE_IDS])
        self.n_lane_keys = 4 * len(net.edges)

        spawn_ss, route_ss = np.random.SeedSequence(seed).spawn(2)
        self.spawn_rng = np.random.default_rng(spawn_ss)
        self.route_rng = np.random.default_rng(route_ss)

        self.clock = 0
        self.signals = [SignalState() for _ in range(net.n_intersections)]
        self.green_masks = np.array([s.effective_mask for s in self.signals])
        self.spawned = 0
        self.arrived = 0
        self.dropped = 0
        self.next_vid = 0
        self.vid = np.zeros(0, dtype=np.int64)
        self.edge = np.zeros(0, dtype=np.int64)
        self.lane = np.zeros(0, dtype=np.int64)
        self.pos = np.zeros(0)
        self.speed = np.zeros(0)
        self.route = np.zeros(0, dtype=np.int64)
        self.ridx = np.zeros(0, dtype=np.int64)
        self.spawn_t = np.zeros(0)
        self.backlog: list[deque] = [deque() for _ in range(N_OUTER)]
        self._lam = np.zeros((N_OUTER, N_OUTER))
        self.demand: ODMatrix | None = None
        if demand is not None:
            self.set_demand(demand)

    # ------------------------------------------------------------------ demand

    def set_demand(self, od: ODMatrix) -> None:
        self.demand = od
        self._lam = od.rates / 3600.0

    def _append(self, **cols) -> None:
        for name in self._COLS:
            setattr(self, name, np.append(getattr(self, name), cols[name]))

    def place_vehicle(self, route: int, route_index: int, lane: int, pos: float,
                      speed: float = 0.0) -> int:
        """Put a vehicle directly on the network (test and scenario set-up)."""
        vid = self.next_vid
        self.next_vid += 1
        self.spawned += 1
        self._append(vid=vid, edge=self.routes.edges[route, route_index], lane=lane,
                     pos=float(pos), speed=float(speed), route=route, ridx=route_index,
                     spawn_t=float(self.clock))
        return vid

    def spawn(self, od: ODMatrix | None = None) -> None:
        """Draw this second's arrivals and insert what the entry lanes admit."""
        lam = self._lam if od is None else od.rates / 3600.0
        counts = self.spawn_rng.poisson(lam)
        cap = self.config.backlog_cap
        for o, d in zip(*np.nonzero(counts)):
            for _ in range(counts[o, d]):
                r = self.routes.choose(int(o), int(d), self.route_rng)
                if len(self.backlog[o]) >= cap:
                    self.dropped += 1
                    continue
                self.backlog[o].append((self.next_vid, r, float(self.clock)))
                self.next_vid += 1
                self.spawned += 1
        if any(self.backlog):
            self._insert_backlog()

    def _insert_backlog(self) -> None:
        cfg = self.config
        need = cfg.vehicle_length + cfg.min_gap
        on_entry = self.edge < N_OUTER  # entry edges are indices 0..11
        keys = self.edge[on_entry] * 4 + self.lane[on_entry]
        tail = np.full(4 * N_OUTER, np.inf)
        np.minimum.at(tail, keys, self.pos[on_entry])
        count = np.bincount(keys, minlength=4 * N_OUTER)
        new = []
        for o, queue in enumerate(self.backlog):
            e = self.entry_edges[o]
            while queue:
                vid, r, t0 = queue[0]
                mask = self.routes.lane_mask[r, 0]
                best = -1
                for l in range(4):
                    k = 4 * e + l
                    if mask >> l & 1 and tail[k] >= need:
                        if best < 0 or count[k] < count[4 * e + best]:
                            best = l
                if best < 0:
                    break
                queue.popleft()
                k = 4 * e + best
                v0 = min(cfg.v_max, max(0.0, tail[k] - need))
                tail[k] = 0.0
                count[k] += 1
                new.append((vid, e, best, 0.0, v0, r, 0, t0))
        if new:
            cols = list(zip(*new))
            for name, values in zip(self._COLS, cols):
                setattr(self, name, np.concatenate(
                    [getattr(self, name), np.array(values, dtype=getattr(self, name).dtype)]))

    # ------------------------------------------------------------------ dynamics

    def step(self, joint_action) -> None:
        """Advance one second under the 9 requested phases."""
        actions = np.asarray(joint_action).reshape(-1)
        if actions.shape != (len(self.signals),):
            raise ValueError(f"expected {len(self.signals)} actions, got {actions.shape}")
        self.signals = [request_phase(s, a) for s, a in zip(self.signals, actions)]
        self.green_masks = np.array([s.effective_mask for s in self.signals])
        self.spawn()
        self._move(((self.green_masks[:, None] >> _BIT) & 1).astype(bool))
        self.signals = [tick_signal(s) for s in self.signals]
        self.clock += 1

    def _move(self, green: np.ndarray) -> None:
        n = self.pos.size
        if n == 0:
            return
        cfg = self.config
        key = self.edge * 4 + self.lane
        order = np.lexsort((self.pos, key))
        for name in self._COLS:
            setattr(self, name, getattr(self, name)[order])
        key = key[order]
        pos, speed, edge = self.pos, self.speed, self.edge
        length = self.edge_len[edge]

        has_leader = np.empty(n, dtype=bool)
        has_leader[:-1] = key[1:] == key[:-1]
        has_leader[-1] = False
        lead_pos = np.empty(n)
        lead_pos[:-1] = pos[1:]
        lead_pos[-1] = np.inf
        gap = np.where(has_leader, lead_pos - cfg.vehicle_length - pos, np.inf)

        desired = np.minimum(speed + cfg.a_max, cfg.v_max)
        head = ~has_leader & ~self.is_exit[edge]
        move = self.routes.move[self.route, self.ridx]
        node = self.edge_head[edge]
        is_green = np.zeros(n, dtype=bool)
        is_green[head] = green[node[head], move[head]]
        stop_gap = length - pos
        red_head = head & ~is_green
        gap = np.where(red_head, stop_gap, gap)
        v_new = np.minimum(desired, np.maximum(0.0, gap - cfg.min_gap))
        new_pos = pos + v_new

        # green heads that would pass the stop line
        crossing = np.flatnonzero(head & is_green & (new_pos > length))
        if crossing.size:
            first = np.ones(n, dtype=bool)
            first[1:] = key[1:] != key[:-1]
            tail = np.full(self.n_lane_keys, np.inf)
            tail[key[first]] = pos[first]
            count = np.bincount(key, minlength=self.n_lane_keys)
            need = cfg.vehicle_length + cfg.min_gap
            routes = self.routes
            for j in crossing:
                r, k = self.route[j], self.ridx[j] + 1
                nxt = routes.edges[r, k]
                mask = routes.lane_mask[r, k]
                best = -1
                for l in range(4):
                    lk = 4 * nxt + l
                    if mask >> l & 1 and tail[lk] >= need:
                        if best < 0 or count[lk] < count[4 * nxt + best]:
                            best = l
                if best < 0:
                    v = max(0.0, min(desired[j], stop_gap[j] - cfg.min_gap))
                    v_new[j] = v
                    new_pos[j] = pos[j] + v
                    continue
                lk = 4 * nxt + best
                p = min(new_pos[j] - length[j], tail[lk] - need)
                tail[lk] = p
                count[lk] += 1
                edge[j] = nxt
                self.lane[j] = best
                self.ridx[j] = k
                new_pos[j] = p

        self.pos = new_pos
        self.speed = v_new
        done = self.is_exit[self.edge] & (new_pos >= self.edge_len[self.edge])
        if done.any():
            self.arrived += int(done.sum())
            keep = ~done
            for name in self._COLS:
                setattr(self, name, getattr(self, name)[keep])

    # ------------------------------------------------------------------ metrics

    @property
    def n_in_network(self) -> int:
        return int(self.pos.size)

    @property
    def n_backlogged(self) -> int:
        return sum(len(q) for q in self.backlog)

    def queue_count(self) -> int:
        """Stopped in-network vehicles (speed < 0.1 m/s) plus the origin backlog."""
        return int(np.count_nonzero(self.speed < STOP_SPEED)) + self.n_backlogged

    def mean_speed(self) -> float:
        """Mean in-network speed; ``v_max`` for an empty network."""
        if self.speed.size == 0:
            return self.config.v_max
        return float(self.speed.mean())

    def queued_ids(self) -> set[int]:
        ids = set(self.vid[self.speed < STOP_SPEED].tolist())
        for q in self.backlog:
            ids.update(v[0] for v in q)
        return ids

    def vehicles(self) -> list[Vehicle]:
        out = []
        for j in range(self.pos.size):
            r = int(self.route[j])
            o, d = self.routes.od[r]
            out.append(Vehicle(
                int(self.vid[j]), self.routes.paths[r], int(self.ridx[j]),
                int(self.lane[j]), float(self.pos[j]), float(self.speed[j]),
                float(self.spawn_t[j]), (OUTER_EDGE_IDS[o], OUTER_EDGE_IDS[d]),
            ))
        return out

    def incoming_stats(self):
        """Per intersection: vehicle count, speed sum and stopped count on its
        incoming edges."""
        node = self.edge_head[self.edge]
        on = node >= 0
        node = node[on]
        m = 9
        count = np.bincount(node, minlength=m).astype(float)
        speed_sum = np.bincount(node, weights=self.speed[on], minlength=m)
        stopped = np.bincount(node, weights=(self.speed[on] < STOP_SPEED), minlength=m)
        return count, speed_sum, stopped

    def trace_record(self) -> dict:
        return {
            "clock": self.clock,
            "queue_count": self.queue_count(),
            "mean_speed": self.mean_speed(),
            "phases": [s.current_phase for s in self.signals],
            "in_clearance": [s.in_clearance for s in self.signals],
        }

    def counters(self) -> dict:
        return {
            "spawned": self.spawned,
            "arrived": self.arrived,
            "in_network": self.n_in_network,
            "backlogged": self.n_backlogged,
            "dropped": self.dropped,
        }
