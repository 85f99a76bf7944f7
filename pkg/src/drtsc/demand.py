"""Origin-destination demand scenarios on the 12 outer edges.

Rates are veh/h; row ``i`` column ``j`` is the flow from outer edge ``i`` to
outer edge ``j`` in :data:`drtsc.grid.OUTER_EDGE_IDS` order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import OUTER_EDGE_IDS

N_OUTER = 12
K_SCENARIOS = 8
SCENARIO_TOTAL = 5000.0
EVEN_INFLOW = 400.0

SYNTHETIC_NAMES = (
    "uniform",
    "inbound",
    "outbound",
    "ns_corridor",
    "ew_corridor",
    "diagonal_a",
    "diagonal_b",
)

# middle edge of every side: these roads run straight through the centre node
CENTRAL_FACING = ("N1", "E1", "S1", "W1")
NORTH = ("N0", "N1", "N2")
SOUTH = ("S0", "S1", "S2")
EAST = ("E0", "E1", "E2")
WEST = ("W0", "W1", "W2")
# outer edges touching each corner intersection
CORNER_NW = ("N0", "W0")
CORNER_SE = ("S2", "E2")
CORNER_NE = ("N2", "E0")
CORNER_SW = ("S0", "W2")


class DemandError(ValueError):
    """Invalid OD data."""


@dataclass(frozen=True)
class ODMatrix:
    rates: np.ndarray
    label: str = ""

    def __post_init__(self):
        rates = np.array(self.rates, dtype=np.float64)
        if rates.shape != (N_OUTER, N_OUTER):
            raise DemandError(f"OD matrix must be 12x12, got {rates.shape}")
        if not np.isfinite(rates).all():
            raise DemandError("OD matrix has non-finite entries")
        if (rates < 0).any():
            raise DemandError("OD matrix has negative entries")
        if np.any(np.diag(rates) != 0):
            raise DemandError("OD matrix has a nonzero diagonal")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    def total(self) -> float:
        return float(self.rates.sum())


def _index(edges) -> list[int]:
    return [OUTER_EDGE_IDS.index(e) for e in edges]


def make_even_demand() -> ODMatrix:
    """400 veh/h per origin, destinations uniform over the other 11 edges."""
    rates = np.full((N_OUTER, N_OUTER), EVEN_INFLOW / (N_OUTER - 1))
    np.fill_diagonal(rates, 0.0)
    return ODMatrix(rates, "even")


def normalize_total(od: ODMatrix, target: float = SCENARIO_TOTAL) -> ODMatrix:
    total = od.total()
    if total <= 0:
        raise DemandError("cannot normalize an OD matrix with zero total")
    if target < 0:
        raise DemandError("target total must be non-negative")
    return ODMatrix(od.rates * (target / total), od.label)


def _block(rows, cols, symmetric=False) -> np.ndarray:
    m = np.zeros((N_OUTER, N_OUTER), dtype=bool)
    m[np.ix_(_index(rows), _index(cols))] = True
    if symmetric:
        m |= m.T
    np.fill_diagonal(m, False)
    return m


def synthetic_blocks(corridor_share=0.7, concentration_share=0.6):
    """Designated block mask and its share of total flow, per synthetic pattern."""
    everything = ~np.eye(N_OUTER, dtype=bool)
    return [
        (everything, 1.0),
        (_block(OUTER_EDGE_IDS, CENTRAL_FACING), concentration_share),
        (_block(CENTRAL_FACING, OUTER_EDGE_IDS), concentration_share),
        (_block(NORTH, SOUTH, symmetric=True), corridor_share),
        (_block(EAST, WEST, symmetric=True), corridor_share),
        (_block(CORNER_NW, CORNER_SE, symmetric=True), corridor_share),
        (_block(CORNER_NE, CORNER_SW, symmetric=True), corridor_share),
    ]


def make_synthetic_set(
    rng: np.random.Generator,
    corridor_share: float = 0.7,
    concentration_share: float = 0.6,
    perturbation: float = 0.1,
    total: float = SCENARIO_TOTAL,
) -> list[ODMatrix]:
    """The seven structured patterns, perturbed and scaled to ``total``.

    Each pattern puts a fixed share of flow on a designated block of OD
    pairs (uniform inside the block) and spreads the rest over every other
    off-diagonal pair.  Entries are then multiplied by i.i.d. factors in
    ``[1 - perturbation, 1 + perturbation]``; the block and its complement
    are rescaled separately so the designated share survives the noise.
    """
    off_diag = ~np.eye(N_OUTER, dtype=bool)
    out = []
    for name, (block, share) in zip(
        SYNTHETIC_NAMES, synthetic_blocks(corridor_share, concentration_share)
    ):
        base = np.zeros((N_OUTER, N_OUTER))
        rest = off_diag & ~block
        base[block] = share / block.sum()
        if rest.any():
            base[rest] = (1.0 - share) / rest.sum()
        noisy = base * rng.uniform(1 - perturbation, 1 + perturbation, base.shape)
        noisy = np.clip(noisy, 0.0, None)
        noisy[~off_diag] = 0.0
        scaled = np.zeros_like(noisy)
        for part, part_share in ((block, share), (rest, 1.0 - share)):
            s = noisy[part].sum()
            if s > 0:
                scaled[part] = noisy[part] * (part_share / s)
        out.append(normalize_total(ODMatrix(scaled, name), total))
    return out


# --------------------------------------------------------------------------
# CSV i/o


def load_od_csv(path) -> ODMatrix:
    """Read an OD CSV: header of 12 outer-edge ids, then 12 rows of rates."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DemandError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DemandError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if len(header) != N_OUTER or len(body) != N_OUTER:
        raise DemandError(
            f"{path}: expected 12 header ids and 12 rows, got "
            f"{len(header)} ids and {len(body)} rows"
        )
    if sorted(header) != sorted(OUTER_EDGE_IDS):
        raise DemandError(f"{path}: header must list the outer edges {OUTER_EDGE_IDS}")
    try:
        values = np.array([[float(c) for c in r] for r in body])
    except ValueError as exc:
        raise DemandError(f"{path}: parse error: {exc}") from exc
    if values.shape != (N_OUTER, N_OUTER):
        raise DemandError(f"{path}: every row needs 12 values")
    order = [header.index(e) for e in OUTER_EDGE_IDS]
    return ODMatrix(values[np.ix_(order, order)], path.stem)


def save_od_csv(od: ODMatrix, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTER_EDGE_IDS)
        for row in od.rates:
            w.writerow([repr(float(v)) for v in row])


def _packaged(name: str) -> ODMatrix:
    with resources.as_file(resources.files("drtsc") / "data" / name) as p:
        return load_od_csv(p)


def data_like_demand(total: float = SCENARIO_TOTAL) -> ODMatrix:
    """The shipped, mildly unbalanced data-like pattern (group 7)."""
    od = normalize_total(_packaged("data_like.csv"), total)
    return ODMatrix(od.rates, "data_like")


def heldout_demand(path=None, total: float = SCENARIO_TOTAL) -> ODMatrix:
    """Held-out evaluation pattern (group 8); the placeholder unless ``path``."""
    od = load_od_csv(path) if path else _packaged("heldout_placeholder.csv")
    od = normalize_total(od, total)
    return ODMatrix(od.rates, "heldout")


# --------------------------------------------------------------------------
# scenario set and mixing


def check_weights(w, k: int = K_SCENARIOS, tol: float = 1e-9) -> np.ndarray:
    """Validate a simplex weight vector and return it as an array."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (k,):
        raise DemandError(f"weight vector must have {k} entries, got {w.shape}")
    if (w < 0).any() or abs(w.sum() - 1.0) > tol:
        raise DemandError(f"weights are not on the simplex: {w}")
    return w


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple[ODMatrix, ...]

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        if len(self.scenarios) != K_SCENARIOS:
            raise DemandError(f"need {K_SCENARIOS} scenarios, got {len(self.scenarios)}")
        stack = np.stack([s.rates for s in self.scenarios])
        stack.setflags(write=False)
        object.__setattr__(self, "_stack", stack)

    def __len__(self):
        return len(self.scenarios)

    def __getitem__(self, k) -> ODMatrix:
        return self.scenarios[k]

    @property
    def stack(self) -> np.ndarray:
        return self._stack


def make_scenario_set(seed: int = 0, **kwargs) -> ScenarioSet:
    """Synthetic patterns 0-6 from ``seed`` plus the data-like pattern 7."""
    total = kwargs.get("total", SCENARIO_TOTAL)
    synthetic = make_synthetic_set(np.random.default_rng(seed), **kwargs)
    return ScenarioSet(synthetic + [data_like_demand(total)])


def mix(w, scenarios: ScenarioSet) -> ODMatrix:
    """Convex combination of the scenario matrices under simplex weights ``w``."""
    w = check_weights(w, len(scenarios))
    rates = np.tensordot(w, scenarios.stack, axes=1)
    label = "mix(" + ",".join(f"{x:.4f}" for x in w) + ")"
    return ODMatrix(rates, label)
