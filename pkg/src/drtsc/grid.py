"""3x3 signalized grid: topology, movements, the phase catalogue and the
clearance / green-carryover signal state machine.

Intersections are indexed ``0..8`` row-major with row 0 at the north edge.
Movement indices are ``2 * approach + class`` with approaches ordered
N, S, E, W and classes SR (straight/right, lanes 0-1) and LT (left/U-turn,
lanes 2-3).  An approach names the side a vehicle arrives *from*, so a
southbound vehicle uses the N approach.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

APPROACHES = ("N", "S", "E", "W")
CLASSES = ("SR", "LT")
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
# right-hand traffic: turning right while heading south leaves westbound
RIGHT_OF = {"S": "W", "N": "E", "E": "S", "W": "N"}
LEFT_OF = {h: OPPOSITE[r] for h, r in RIGHT_OF.items()}
STEP = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}

CLEARANCE_S = 5
N_PHASES = 8

# physical lanes usable by each turn
TURN_LANES = {
    "right": (0,),
    "straight": (0, 1),
    "left": (2, 3),
    "uturn": (3,),
    "exit": (0, 1, 2, 3),
}


class TopologyError(ValueError):
    """Grid dimensions this workbench does not support."""


class Movement(NamedTuple):
    approach: str
    cls: str

    @property
    def index(self) -> int:
        return 2 * APPROACHES.index(self.approach) + CLASSES.index(self.cls)

    def __str__(self) -> str:
        return f"{self.approach}-{self.cls}"


MOVEMENTS = tuple(Movement(a, c) for a in APPROACHES for c in CLASSES)


def movement(name: str) -> Movement:
    """Parse ``"N-SR"`` style names."""
    approach, cls = name.split("-")
    m = Movement(approach, cls)
    if approach not in APPROACHES or cls not in CLASSES:
        raise ValueError(f"unknown movement {name!r}")
    return m


PHASES: tuple[frozenset[Movement], ...] = tuple(
    frozenset(movement(n) for n in names)
    for names in (
        ("N-SR", "S-SR"),
        ("E-SR", "W-SR"),
        ("N-LT", "S-LT"),
        ("E-LT", "W-LT"),
        ("N-SR", "N-LT"),
        ("S-SR", "S-LT"),
        ("E-SR", "E-LT"),
        ("W-SR", "W-LT"),
    )
)


def _mask(moves) -> int:
    out = 0
    for m in moves:
        out |= 1 << m.index
    return out


PHASE_MASKS = tuple(_mask(p) for p in PHASES)


def mask_to_set(mask: int) -> frozenset[Movement]:
    return frozenset(m for m in MOVEMENTS if mask >> m.index & 1)


def _axis(approach: str) -> str:
    return "NS" if approach in ("N", "S") else "EW"


def movements_conflict(a: Movement, b: Movement) -> bool:
    """True when ``a`` and ``b`` may not be green together.

    Perpendicular streams always conflict when either is a left turn, and
    perpendicular straight/right streams cross.  Along one axis only the
    straight/right vs opposing left-turn pair conflicts; opposing SR pairs
    and opposing LT pairs run protected.
    """
    if a.approach == b.approach:
        return False
    if _axis(a.approach) != _axis(b.approach):
        return True
    return a.cls != b.cls


CONFLICTS = np.array(
    [[movements_conflict(a, b) for b in MOVEMENTS] for a in MOVEMENTS], dtype=bool
)


def mask_conflict_free(mask: int) -> bool:
    idx = [m.index for m in MOVEMENTS if mask >> m.index & 1]
    return not CONFLICTS[np.ix_(idx, idx)].any()


# --------------------------------------------------------------------------
# signal state machine


@dataclass(frozen=True, slots=True)
class SignalState:
    current_phase: int = 0
    time_since_change: int = 0
    clearance_remaining: int = 0
    pending_phase: int | None = None
    carryover_mask: int = 0

    @property
    def in_clearance(self) -> bool:
        return self.clearance_remaining > 0

    @property
    def effective_mask(self) -> int:
        if self.clearance_remaining > 0:
            return self.carryover_mask
        return PHASE_MASKS[self.current_phase]

    @property
    def effective_green(self) -> frozenset[Movement]:
        return mask_to_set(self.effective_mask)

    @property
    def carryover_set(self) -> frozenset[Movement]:
        return mask_to_set(self.carryover_mask)

    @property
    def target_phase(self) -> int:
        """Phase the signal is heading to: pending during clearance."""
        return self.current_phase if self.pending_phase is None else self.pending_phase


def _check_phase(p: int) -> None:
    if not 0 <= int(p) < N_PHASES:
        raise ValueError(f"invalid phase index {p}")


def request_phase(state: SignalState, new_phase: int) -> SignalState:
    """Ask the signal for ``new_phase``.

    Holding the active phase, or re-requesting the phase already pending,
    leaves the state untouched.  A switch starts a full clearance interval
    whose green set is the carryover of the currently effective greens and
    the requested phase.  A different request during clearance replaces the
    pending phase and recomputes the carryover; the 5 s timer restarts only
    if that takes green away from some movement, so every movement outside
    the carryover has been red for a full interval when the pending phase
    activates.
    """
    _check_phase(new_phase)
    new_phase = int(new_phase)
    if state.clearance_remaining > 0:
        if new_phase == state.pending_phase:
            return state
        carry = state.carryover_mask & PHASE_MASKS[new_phase]
        remaining = CLEARANCE_S if carry != state.carryover_mask else state.clearance_remaining
        return SignalState(
            state.current_phase, state.time_since_change, remaining, new_phase, carry
        )
    if new_phase == state.current_phase:
        return state
    carry = PHASE_MASKS[state.current_phase] & PHASE_MASKS[new_phase]
    return SignalState(
        state.current_phase, state.time_since_change, CLEARANCE_S, new_phase, carry
    )


def tick_signal(state: SignalState) -> SignalState:
    """Advance the signal by one second."""
    if state.clearance_remaining > 0:
        remaining = state.clearance_remaining - 1
        if remaining == 0:
            return SignalState(state.pending_phase, 0, 0, None, 0)
        return SignalState(
            state.current_phase,
            state.time_since_change + 1,
            remaining,
            state.pending_phase,
            state.carryover_mask,
        )
    return SignalState(state.current_phase, state.time_since_change + 1)


# --------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class GridSpec:
    rows: int = 3
    cols: int = 3
    link_length: float = 100.0
    lanes_per_direction: int = 4

    def __post_init__(self):
        if self.rows != 3 or self.cols != 3:
            raise TopologyError(
                f"only a 3x3 grid is supported, got {self.rows}x{self.cols}"
            )
        if self.lanes_per_direction != 4:
            raise TopologyError("lanes_per_direction must be 4")
        if not self.link_length > 0:
            raise ValueError("link_length must be positive")

    @property
    def outer_edge_ids(self) -> tuple[str, ...]:
        return OUTER_EDGE_IDS


# boundary roads, listed clockwise from the north-west corner
OUTER_EDGE_IDS = tuple(f"{side}{k}" for side in "NESW" for k in range(3))


def _outer_node(outer: str) -> tuple[int, int]:
    side, k = outer[0], int(outer[1])
    return {"N": (0, k), "S": (2, k), "E": (k, 2), "W": (k, 0)}[side]


def turn_kind(heading_in: str, heading_out: str) -> str:
    if heading_out == heading_in:
        return "straight"
    if heading_out == OPPOSITE[heading_in]:
        return "uturn"
    if heading_out == RIGHT_OF[heading_in]:
        return "right"
    return "left"


def turn_class(kind: str) -> str:
    return "SR" if kind in ("straight", "right") else "LT"


@dataclass(frozen=True)
class Edge:
    id: str
    index: int
    kind: str  # "entry" | "exit" | "internal"
    tail: int | None  # upstream intersection
    head: int | None  # downstream intersection
    heading: str  # direction of travel
    length: float
    lanes: int
    outer: str | None = None

    @property
    def approach(self) -> str:
        """Side of ``head`` this edge arrives from."""
        return OPPOSITE[self.heading]


@dataclass
class Network:
    spec: GridSpec
    edges: list[Edge]
    incoming: np.ndarray  # (9, 4) edge index per approach N,S,E,W
    neighbors: np.ndarray  # (9, 4) intersection per direction N,S,E,W, -1 if none
    entry_edge: dict[str, int] = field(default_factory=dict)
    exit_edge: dict[str, int] = field(default_factory=dict)
    successors: dict[int, list[int]] = field(default_factory=dict)

    n_intersections = 9

    @property
    def outer_edge_ids(self) -> tuple[str, ...]:
        return OUTER_EDGE_IDS

    def edge(self, ident: str) -> Edge:
        for e in self.edges:
            if e.id == ident:
                return e
        raise KeyError(ident)

    def turn(self, e_in: int, e_out: int) -> str:
        a, b = self.edges[e_in], self.edges[e_out]
        if a.head is None or a.head != b.tail:
            raise ValueError(f"{a.id} does not feed {b.id}")
        return turn_kind(a.heading, b.heading)

    def to_json(self) -> str:
        nodes = [
            {"id": i, "row": i // 3, "col": i % 3,
             "neighbors": dict(zip(APPROACHES, map(int, self.neighbors[i])))}
            for i in range(self.n_intersections)
        ]
        edges = [
            {
                "id": e.id,
                "kind": e.kind,
                "from": e.tail,
                "to": e.head,
                "heading": e.heading,
                "length": e.length,
                "lanes": [
                    {"index": k, "movement": "SR" if k < 2 else "LT"}
                    for k in range(e.lanes)
                ],
                "outer": e.outer,
            }
            for e in self.edges
        ]
        return json.dumps({"nodes": nodes, "edges": edges}, indent=2)


def build_grid(spec: GridSpec | None = None) -> Network:
    """Construct the grid network.  Edge order: 12 entries, 12 exits, 24 links."""
    spec = spec or GridSpec()
    L, lanes = float(spec.link_length), spec.lanes_per_direction
    edges: list[Edge] = []

    def node(r, c):
        return r * spec.cols + c

    entry, exit_ = {}, {}
    for o in OUTER_EDGE_IDS:
        side = o[0]
        entry[o] = len(edges)
        edges.append(
            Edge(f"in_{o}", len(edges), "entry", None, node(*_outer_node(o)),
                 OPPOSITE[side], L, lanes, o)
        )
    for o in OUTER_EDGE_IDS:
        side = o[0]
        exit_[o] = len(edges)
        edges.append(
            Edge(f"out_{o}", len(edges), "exit", node(*_outer_node(o)), None,
                 side, L, lanes, o)
        )
    neighbors = -np.ones((9, 4), dtype=np.int64)
    for r in range(spec.rows):
        for c in range(spec.cols):
            for k, d in enumerate(APPROACHES):
                dr, dc = STEP[d]
                r2, c2 = r + dr, c + dc
                if 0 <= r2 < spec.rows and 0 <= c2 < spec.cols:
                    neighbors[node(r, c), k] = node(r2, c2)
                    edges.append(
                        Edge(f"n{node(r, c)}_n{node(r2, c2)}", len(edges), "internal",
                             node(r, c), node(r2, c2), d, L, lanes)
                    )

    incoming = -np.ones((9, 4), dtype=np.int64)
    for e in edges:
        if e.head is not None:
            incoming[e.head, APPROACHES.index(e.approach)] = e.index
    assert (incoming >= 0).all()

    successors = {
        e.index: [
            f.index
            for f in edges
            if f.tail is not None
            and f.tail == e.head
            and f.heading != OPPOSITE[e.heading]
        ]
        for e in edges
        if e.head is not None
    }
    return Network(spec, edges, incoming, neighbors, entry, exit_, successors)
