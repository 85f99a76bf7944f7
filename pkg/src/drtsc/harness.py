"""Evaluation and reporting: per-group rollouts, J statistics, worst-group
comparison and the Table-shaped CSV outputs."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .controllers import Controller, FixedCycleController, PolicyController, RandomController
from .demand import K_SCENARIOS, ODMatrix, ScenarioSet, mix
from .microsim import SimConfig, SimState
from .observe import ObsConfig, RewardWeights, WindowStats, local_rewards, window_waiting_time
from .policy import DensePolicy, sample_weights
from .trainers import warmup, window_obs

N_GROUPS = 9  # 0-6 synthetic, 7 data-like, 8 held-out


class ReportError(ValueError):
    """Incomplete or inconsistent evaluation artifacts."""


@dataclass
class GroupMetrics:
    group: int
    controller: str
    rollouts: int
    mean_queue: float
    mean_speed: float
    queue_series: list[float]
    speed_series: list[float]
    episode_returns: list[float]
    queue_std: list[float] = field(default_factory=list)
    speed_std: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.rollouts < 1:
            raise ValueError("rollouts must be at least 1")
        if len(self.queue_series) != len(self.speed_series):
            raise ValueError("queue and speed series differ in length")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "GroupMetrics":
        return cls(**json.loads(text))


ControllerFactory = Callable[[np.random.Generator], Controller]


def controller_factory(policy, mode: str = "greedy", cycle: int = 30,
                       obs_cfg: ObsConfig = ObsConfig()) -> ControllerFactory:
    """Build a per-rollout controller factory from a policy or a name
    (``"random"`` or ``"fixed"``)."""
    if isinstance(policy, DensePolicy):
        return lambda rng: PolicyController(policy, rng, mode, obs_cfg)
    if policy == "random":
        return RandomController
    if policy == "fixed":
        return lambda rng: FixedCycleController(cycle)
    if callable(policy):
        return policy
    raise ValueError(f"unknown controller {policy!r}")


def _rollout_seeds(seed: int, rollout: int) -> tuple[int, np.random.Generator]:
    sim_ss, act_ss = np.random.SeedSequence([seed, 7, rollout]).spawn(2)
    return int(sim_ss.generate_state(1, dtype=np.uint64)[0]), np.random.default_rng(act_ss)


def evaluate_group(policy, od: ODMatrix, rollouts: int, horizon: int, seed: int = 0,
                   group: int = 0, warmup: int = 0, label: str = "", mode: str = "greedy",
                   sim_cfg: SimConfig | None = None, obs_cfg: ObsConfig = ObsConfig(),
                   reward: RewardWeights = RewardWeights(), link_length: float = 100.0,
                   cycle: int = 30, trace: Callable[[int, dict], None] | None = None
                   ) -> GroupMetrics:
    """Run ``rollouts`` rollouts with demand fixed to ``od``.

    Only the simulation seed changes between rollouts.  ``warmup`` seconds
    are simulated first and left out of every average and series.
    ``trace(rollout, record)`` receives one record per recorded second.
    """
    if rollouts < 1 or horizon < 1:
        raise ValueError("rollouts and horizon must be positive")
    make = controller_factory(policy, mode, cycle, obs_cfg)
    queues = np.zeros((rollouts, horizon))
    speeds = np.zeros((rollouts, horizon))
    returns = []
    for r in range(rollouts):
        sim_seed, rng = _rollout_seeds(seed, r)
        state = SimState(sim_seed, sim_cfg, link_length, od)
        ctrl = make(rng)
        for _ in range(warmup):
            state.step(ctrl.act(state))
        total = 0.0
        for t in range(horizon):
            state.step(ctrl.act(state))
            queues[r, t] = state.queue_count()
            speeds[r, t] = state.mean_speed()
            total += float(local_rewards(state, reward, obs_cfg).sum())
            if trace is not None:
                trace(r, {"t": t, "queue": int(queues[r, t]), "speed": speeds[r, t]})
        returns.append(total)
    q_series, s_series = queues.mean(axis=0), speeds.mean(axis=0)
    return GroupMetrics(
        group=group,
        controller=label or getattr(policy, "label", None) or str(
            "policy" if isinstance(policy, DensePolicy) else policy),
        rollouts=rollouts,
        mean_queue=float(q_series.mean()),
        mean_speed=float(s_series.mean()),
        queue_series=q_series.tolist(),
        speed_series=s_series.tolist(),
        episode_returns=returns,
        queue_std=queues.std(axis=0).tolist(),
        speed_std=speeds.std(axis=0).tolist(),
    )


def evaluate_groups(policy, groups: dict[int, ODMatrix], cfg: RunConfig, label: str,
                    out_dir=None, trace: bool = False) -> list[GroupMetrics]:
    """Evaluate one controller on every group; optionally persist per-group
    JSON (and per-second JSONL traces) under ``out_dir``."""
    ev = cfg.eval
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for g, od in sorted(groups.items()):
        fh = tracer = None
        if out and trace:
            fh = (out / f"group_{g}_trace.jsonl").open("w", encoding="utf-8")

            def tracer(r, rec, fh=fh):
                fh.write(json.dumps({"rollout": r, **rec}) + "\n")
        try:
            m = evaluate_group(policy, od, ev.rollouts, ev.horizon, ev.seed * 1000 + g, g,
                               ev.warmup, label, ev.mode, cfg.sim, cfg.obs, cfg.reward,
                               cfg.link_length, ev.fixed_cycle, tracer)
            if fh:
                fh.write(json.dumps({"summary": True, "group": g, "mean_queue": m.mean_queue,
                                     "mean_speed": m.mean_speed}) + "\n")
        finally:
            if fh:
                fh.close()
        if out:
            (out / f"group_{g}.json").write_text(m.to_json(), encoding="utf-8")
        results.append(m)
    return results


@dataclass(frozen=True)
class EfficacyResult:
    """Window waiting times (vehicle-seconds) per seeded window."""

    estimator: list[float]
    uniform: list[float]

    @property
    def gain_pct(self) -> float:
        return relative_change(float(np.mean(self.uniform)), float(np.mean(self.estimator)))


def mixture_efficacy(theta: DensePolicy, psi: DensePolicy, scenarios: ScenarioSet,
                     cfg: RunConfig, windows: int = 20, seed: int = 0) -> EfficacyResult:
    """Waiting time induced by estimator-drawn mixtures against symmetric
    Dirichlet draws.

    Each seeded window is simulated twice from the same warmed-up state
    (same simulator seed, same warm-up mixture, greedy ``theta``), once per
    arm, so the arms differ only in the mixture applied for the window.
    """
    tc = cfg.wce
    out = {"estimator": [], "uniform": []}
    for j in range(windows):
        ss = np.random.SeedSequence([seed, 11, j])
        sim_seed = int(ss.generate_state(1)[0])
        for arm in out:
            rng = np.random.default_rng(ss)
            state = SimState(sim_seed, cfg.sim, cfg.link_length)
            ctrl = PolicyController(theta, rng, cfg.eval.mode, cfg.obs)
            stats = WindowStats()
            warmup(state, scenarios, rng, tc.warmup, ctrl.act, stats)
            if arm == "estimator":
                w = sample_weights(psi, window_obs(stats, cfg), rng)[0]
            else:
                w = rng.dirichlet(np.ones(len(scenarios)))
            state.set_demand(mix(w, scenarios))
            stats = WindowStats()
            for _ in range(tc.window):
                state.step(ctrl.act(state))
                stats.update(state)
            out[arm].append(window_waiting_time(stats.queue_series, tc.window))
    return EfficacyResult(out["estimator"], out["uniform"])


# --------------------------------------------------------------------------
# statistics


def j_stats(per_group_returns) -> tuple[float, float, int]:
    """(J_avg, J_worst, argmin group) over exactly the 8 training groups;
    ties resolve to the lowest index."""
    v = np.asarray(per_group_returns, dtype=np.float64)
    if v.shape != (K_SCENARIOS,):
        raise ValueError(f"j_stats needs {K_SCENARIOS} values, got {v.shape}")
    k = int(np.argmin(v))
    return float(v.mean()), float(v[k]), k


def relative_change(baseline: float, robust: float) -> float:
    """Percent change of ``robust`` relative to ``baseline``."""
    if baseline == 0:
        raise ZeroDivisionError("relative change against a zero baseline")
    return 100.0 * (robust - baseline) / baseline


@dataclass(frozen=True)
class WorstCase:
    baseline_group: int
    robust_group: int
    baseline_value: float
    robust_value: float
    change_pct: float


def _worst(values, higher_is_worse: bool) -> int:
    v = np.asarray(values, dtype=np.float64)[:K_SCENARIOS]
    return int(np.argmax(v) if higher_is_worse else np.argmin(v))


def worst_case_comparison(base_queue, base_speed, rob_queue, rob_speed) -> dict:
    """Each controller's own worst group per metric (largest queue, lowest
    speed over groups 0-7), then the change between those worst values."""
    out = {}
    for name, b, r, hi in (("queue", base_queue, rob_queue, True),
                           ("speed", base_speed, rob_speed, False)):
        gb, gr = _worst(b, hi), _worst(r, hi)
        out[name] = WorstCase(gb, gr, float(b[gb]), float(r[gr]),
                              relative_change(float(b[gb]), float(r[gr])))
    return out


@dataclass
class RobustnessReport:
    labels: tuple[str, str]
    queue: np.ndarray  # (groups, 2)
    speed: np.ndarray  # (groups, 2)
    returns: np.ndarray  # (8, 2) J_k per controller
    j_avg: tuple[float, float]
    j_worst: tuple[float, float]
    j_argmin: tuple[int, int]
    worst: dict

    @property
    def queue_change(self) -> np.ndarray:
        return np.array([relative_change(b, r) for b, r in self.queue])

    @property
    def speed_change(self) -> np.ndarray:
        return np.array([relative_change(b, r) for b, r in self.speed])


def build_report(queue, speed, returns=None, labels=("MARL", "DR-MARL")) -> RobustnessReport:
    """``queue`` and ``speed`` are (groups, 2) arrays, baseline first.

    ``returns`` gives J_k per controller for groups 0-7; by default the
    negated horizon-mean queue.
    """
    queue = np.asarray(queue, dtype=np.float64)
    speed = np.asarray(speed, dtype=np.float64)
    if queue.shape[0] < K_SCENARIOS or queue.shape != speed.shape or queue.shape[1] != 2:
        raise ReportError("need queue and speed for at least groups 0-7 and two controllers")
    if returns is None:
        returns = -queue[:K_SCENARIOS]
    returns = np.asarray(returns, dtype=np.float64)
    stats = [j_stats(returns[:, c]) for c in range(2)]
    worst = worst_case_comparison(queue[:, 0], speed[:, 0], queue[:, 1], speed[:, 1])
    return RobustnessReport(tuple(labels), queue, speed, returns,
                            (stats[0][0], stats[1][0]), (stats[0][1], stats[1][1]),
                            (stats[0][2], stats[1][2]), worst)


def report_from_metrics(base: list[GroupMetrics], robust: list[GroupMetrics],
                        return_proxy: str = "queue") -> RobustnessReport:
    if len(base) != len(robust) or len(base) < K_SCENARIOS:
        raise ReportError("both evaluations must cover the same groups, at least 0-7")
    queue = [[b.mean_queue, r.mean_queue] for b, r in zip(base, robust)]
    speed = [[b.mean_speed, r.mean_speed] for b, r in zip(base, robust)]
    returns = None
    if return_proxy == "reward":
        returns = [[np.mean(b.episode_returns), np.mean(r.episode_returns)]
                   for b, r in zip(base[:K_SCENARIOS], robust[:K_SCENARIOS])]
    labels = (base[0].controller, robust[0].controller)
    return build_report(queue, speed, returns, labels)


# --------------------------------------------------------------------------
# artifacts on disk


def load_eval_dir(path) -> list[GroupMetrics]:
    path = Path(path)
    if not path.is_dir():
        raise ReportError(f"evaluation directory {path} does not exist")
    files = sorted(path.glob("group_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise ReportError(f"{path} holds no group_*.json files")
    out = [GroupMetrics.from_json(p.read_text(encoding="utf-8")) for p in files]
    if [m.group for m in out] != list(range(len(out))):
        raise ReportError(f"{path}: groups are not contiguous from 0")
    return out


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def render_report(rep: RobustnessReport) -> dict[str, str]:
    """CSV texts keyed by file name."""
    a, b = rep.labels
    table1 = [["group", f"queue_{a}", f"queue_{b}", f"speed_{a}", f"speed_{b}"]]
    for g in range(rep.queue.shape[0]):
        table1.append([g, *map(_fmt, rep.queue[g]), *map(_fmt, rep.speed[g])])
    table2 = [["group", "queue_change_pct", "speed_change_pct"]]
    for g, (dq, ds) in enumerate(zip(rep.queue_change, rep.speed_change)):
        table2.append([g, _fmt(dq), _fmt(ds)])
    summary = [["quantity", a, b]]
    summary.append(["J_avg", _fmt(rep.j_avg[0]), _fmt(rep.j_avg[1])])
    summary.append(["J_worst", _fmt(rep.j_worst[0]), _fmt(rep.j_worst[1])])
    summary.append(["J_argmin_group", rep.j_argmin[0], rep.j_argmin[1]])
    for name in ("queue", "speed"):
        w = rep.worst[name]
        summary.append([f"worst_{name}_group", w.baseline_group, w.robust_group])
        summary.append([f"worst_{name}_value", _fmt(w.baseline_value), _fmt(w.robust_value)])
        summary.append([f"worst_{name}_change_pct", _fmt(w.change_pct), ""])
    return {"table1.csv": _csv(table1), "table2.csv": _csv(table2),
            "summary.csv": _csv(summary)}


def render_plot_data(base: list[GroupMetrics], robust: list[GroupMetrics]) -> str:
    rows = [["controller", "group", "t", "queue_mean", "queue_std", "speed_mean", "speed_std"]]
    for metrics in (base, robust):
        for m in metrics:
            qs = m.queue_std or [0.0] * len(m.queue_series)
            ss = m.speed_std or [0.0] * len(m.speed_series)
            for t, (q, qd, s, sd) in enumerate(zip(m.queue_series, qs, m.speed_series, ss)):
                rows.append([m.controller, m.group, t, _fmt(q), _fmt(qd), _fmt(s), _fmt(sd)])
    return _csv(rows)


def write_report(base_dir, robust_dir, out_dir, return_proxy: str = "queue") -> dict[str, str]:
    base, robust = load_eval_dir(base_dir), load_eval_dir(robust_dir)
    files = render_report(report_from_metrics(base, robust, return_proxy))
    files["plot_data.csv"] = render_plot_data(base, robust)
    _write_files(files, out_dir)
    return files


def _write_files(files: dict[str, str], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")


def load_table1_fixture(path=None) -> tuple[np.ndarray, np.ndarray]:
    """Table-1 shaped CSV (group, queue_a, queue_b, speed_a, speed_b)."""
    if path is None:
        text = (resources.files("drtsc") / "data" / "table1_fixture.csv").read_text(
            encoding="utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ReportError(f"cannot read fixture {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    try:
        body = np.array([[float(x) for x in r[1:5]] for r in rows[1:] if r])
    except (ValueError, IndexError) as exc:
        raise ReportError(f"malformed Table-1 fixture: {exc}") from exc
    if body.ndim != 2 or body.shape[0] < K_SCENARIOS or body.shape[1] != 4:
        raise ReportError("Table-1 fixture needs at least 8 rows of 4 values")
    return body[:, 0:2], body[:, 2:4]


def write_fixture_report(out_dir, path=None) -> dict[str, str]:
    queue, speed = load_table1_fixture(path)
    files = render_report(build_report(queue, speed))
    _write_files(files, out_dir)
    return files
