"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid input or configuration,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, RunConfig, load_config
from .demand import (
    DemandError,
    ScenarioSet,
    heldout_demand,
    make_scenario_set,
    save_od_csv,
)
from .policy import CheckpointError, load_policy

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file, or 'desk' / 'paper' (default desk)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--scale", type=float, default=1.0,
                        help="multiply horizons and iteration counts")
    common.add_argument("--out", default="out", help="output directory")

    p = _Parser(prog="drtsc", description="Robust traffic-signal control workbench")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-demand", parents=[common], help="write the 8 scenario CSVs")
    sub.add_parser("train-baseline", parents=[common], help="train on even demand")
    s = sub.add_parser("train-wce", parents=[common], help="train the demand estimator")
    s.add_argument("--theta", required=True, help="frozen signal-policy checkpoint")
    s = sub.add_parser("train-drmarl", parents=[common], help="robust fine-tuning")
    s.add_argument("--theta", required=True, help="baseline signal-policy checkpoint")
    s.add_argument("--psi", required=True, help="frozen estimator checkpoint")
    s = sub.add_parser("evaluate", parents=[common], help="evaluate one controller")
    s.add_argument("--controller", required=True,
                   help="policy checkpoint path, 'random' or 'fixed'")
    s.add_argument("--label", default="", help="controller label in reports")
    s.add_argument("--groups", default="0-8", help="group set, e.g. 0-8, 7 or 0,3,8")
    s.add_argument("--heldout",
                   help="OD CSV for group 8 (default: demand.heldout_path, else the placeholder)")
    s.add_argument("--trace", action="store_true", help="write per-second JSONL traces")
    s = sub.add_parser("report", parents=[common], help="build tables from evaluations")
    s.add_argument("--baseline", help="evaluation directory of the baseline controller")
    s.add_argument("--robust", help="evaluation directory of the robust controller")
    s.add_argument("--fixtures", nargs="?", const="", default=None,
                   help="build tables from a Table-1 shaped CSV (packaged one if no path)")
    sub.add_parser("selftest", parents=[common], help="run the invariant suites")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be a non-negative integer")
        cfg = cfg.with_seed(args.seed)
    if not args.scale > 0:
        raise UsageError("--scale must be positive")
    return cfg.scaled(args.scale).validate()


def _scenarios(cfg: RunConfig) -> ScenarioSet:
    d = cfg.demand
    return make_scenario_set(cfg.seed, corridor_share=d.corridor_share,
                             concentration_share=d.concentration_share,
                             perturbation=d.perturbation, total=d.total)


def _parse_groups(text: str) -> list[int]:
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                a, b = part.split("-")
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"--groups: cannot parse {text!r}") from None
    if not out or any(not 0 <= g < harness.N_GROUPS for g in out):
        raise UsageError(f"--groups: groups must lie in 0..{harness.N_GROUPS - 1}")
    return sorted(set(out))


def _load_checkpoint(path: str, flag: str):
    if not Path(path).exists():
        raise CheckpointError(f"{flag}: checkpoint {path} does not exist")
    return load_policy(path)


def _cmd_gen_demand(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, od in enumerate(_scenarios(cfg)):
        save_od_csv(od, out / f"scenario_{k}_{od.label}.csv")
    print(f"wrote 8 scenarios to {out}")


def _cmd_train_baseline(args, cfg):
    from .trainers import train_baseline

    res = train_baseline(cfg, out_dir=args.out, log_path=Path(args.out) / "baseline_curve.jsonl")
    print(f"baseline: {len(res.curve)} iterations, checkpoint {Path(args.out) / 'baseline.bin'}")


def _write_weights(path: Path, weights_log) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for it, k, tau, w in weights_log:
            fh.write(json.dumps({"iteration": it, "rollout": k, "window": tau,
                                 "weights": w}) + "\n")


def _cmd_train_wce(args, cfg):
    from .trainers import train_wce

    theta = _load_checkpoint(args.theta, "--theta")
    res = train_wce(cfg, theta, _scenarios(cfg), out_dir=args.out,
                    log_path=Path(args.out) / "wce_curve.jsonl")
    _write_weights(Path(args.out) / "wce_weights.jsonl", res.weights_log)
    print(f"estimator: {len(res.curve)} iterations, checkpoint {Path(args.out) / 'wce.bin'}")


def _cmd_train_drmarl(args, cfg):
    from .trainers import train_drmarl

    theta = _load_checkpoint(args.theta, "--theta")
    psi = _load_checkpoint(args.psi, "--psi")
    res = train_drmarl(cfg, theta, psi, _scenarios(cfg), out_dir=args.out,
                       log_path=Path(args.out) / "drmarl_curve.jsonl")
    _write_weights(Path(args.out) / "drmarl_weights.jsonl", res.weights_log)
    print(f"robust: {len(res.curve)} iterations, checkpoint {Path(args.out) / 'drmarl.bin'}")


def _cmd_evaluate(args, cfg):
    groups = _parse_groups(args.groups)
    if args.controller in ("random", "fixed"):
        controller, label = args.controller, args.label or args.controller
    else:
        controller = _load_checkpoint(args.controller, "--controller")
        label = args.label or Path(args.controller).stem
    heldout = args.heldout or cfg.demand.heldout_path or None
    scen = list(_scenarios(cfg)) + [heldout_demand(heldout, cfg.demand.total)]
    results = harness.evaluate_groups(controller, {g: scen[g] for g in groups}, cfg, label,
                                      args.out, args.trace)
    for m in results:
        print(f"group {m.group}: mean queue {m.mean_queue:.3f}, mean speed {m.mean_speed:.3f}")


def _cmd_report(args, cfg):
    if args.fixtures is not None:
        files = harness.write_fixture_report(args.out, args.fixtures or None)
    else:
        if not args.baseline or not args.robust:
            raise UsageError("report: --baseline and --robust are required without --fixtures")
        files = harness.write_report(args.baseline, args.robust, args.out,
                                     cfg.eval.return_proxy)
    sys.stdout.write(files["table2.csv"])


def _cmd_selftest(args, cfg):
    from .selftest import run_selftest

    failures = run_selftest()
    for line in failures:
        print(line)
    if failures:
        raise harness.ReportError(f"{len(failures)} self-test check(s) failed")
    print("selftest: all checks passed")


COMMANDS = {
    "gen-demand": _cmd_gen_demand,
    "train-baseline": _cmd_train_baseline,
    "train-wce": _cmd_train_wce,
    "train-drmarl": _cmd_train_drmarl,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DemandError, CheckpointError, harness.ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
