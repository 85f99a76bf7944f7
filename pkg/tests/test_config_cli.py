import json
from pathlib import Path

import pytest

from drtsc import cli
from drtsc.config import ConfigError, load_config, parse_config
from drtsc.demand import load_od_csv, make_even_demand, save_od_csv

TINY = """
[run]
seed = 3
[baseline]
horizon = 20
rollouts = 2
iterations = 2
[wce]
horizon = 40
window = 20
warmup = 10
rollouts = 1
iterations = 2
batch_size = 4
[drmarl]
horizon = 40
window = 20
warmup = 10
rollouts = 1
iterations = 1
[eval]
horizon = 20
warmup = 5
rollouts = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def test_shipped_configs_load():
    desk, paper = load_config("desk"), load_config("paper")
    assert load_config(None) == desk
    assert (paper.baseline.horizon, paper.baseline.rollouts, paper.baseline.iterations) == \
        (900, 10, 400)
    assert (paper.wce.horizon, paper.wce.rollouts, paper.wce.iterations) == (9600, 8, 50)
    assert paper.wce.horizon // paper.wce.window == 16
    assert (paper.drmarl.horizon, paper.drmarl.rollouts, paper.drmarl.iterations) == \
        (9600, 2, 400)
    assert (paper.eval.horizon, paper.eval.rollouts) == (3600, 10)
    assert (desk.baseline.horizon, desk.baseline.rollouts, desk.baseline.iterations) == \
        (900, 4, 300)
    assert desk.obs.reward_queue_cap == 40 and desk.reward.kappa_s == 1.0


def test_parse_overrides_and_seed(tiny_cfg):
    cfg = load_config(tiny_cfg)
    assert cfg.seed == 3 and cfg.baseline.seed == 3 and cfg.eval.seed == 3
    assert cfg.baseline.horizon == 20 and cfg.wce.window == 20
    assert cfg.with_seed(9).drmarl.seed == 9


@pytest.mark.parametrize("text,match", [
    ("[nope]\nx = 1\n", "unknown section"),
    ("[baseline]\nhorizonn = 3\n", "unknown key"),
    ("[baseline]\nhorizon = abc\n", "cannot parse"),
    ("[baseline]\nhorizon = -5\n", "positive"),
    ("[wce]\nhorizon = 1000\n", "does not divide"),
    ("[baseline]\ncredit = shared\n", "credit"),
    ("[eval]\nmode = fuzzy\n", "greedy"),
    ("[run]\nspeed = 3\n", "unknown key"),
    ("not an ini", "."),
])
def test_parse_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_load_missing_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")


def test_scaling_keeps_whole_windows():
    cfg = load_config("paper").scaled(0.1)
    assert cfg.wce.horizon % cfg.wce.window == 0 and cfg.wce.horizon == 1200
    assert cfg.baseline.horizon == 90 and cfg.baseline.iterations == 40
    assert cfg.eval.horizon == 360
    tiny = load_config("desk").scaled(0.001)
    assert tiny.baseline.iterations == 1 and tiny.wce.horizon == tiny.wce.window
    with pytest.raises(ConfigError):
        load_config("desk").scaled(0)


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_demand(tmp_path, capsys):
    code, _, _ = _run(["gen-demand", "--seed", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    files = sorted(tmp_path.glob("scenario_*.csv"))
    assert len(files) == 8
    for f in files:
        assert abs(load_od_csv(f).total() - 5000.0) <= 1e-6


def test_usage_errors(capsys):
    assert _run(["no-such-command"], capsys)[0] == 1
    assert _run([], capsys)[0] == 1
    code, _, err = _run(["evaluate", "--controller", "fixed", "--groups", "12"], capsys)
    assert code == 1 and "--groups" in err
    code, _, err = _run(["gen-demand", "--scale", "-1"], capsys)
    assert code == 1 and "--scale" in err
    code, _, err = _run(["report"], capsys)
    assert code == 1 and "--baseline" in err
    code, _, err = _run(["train-wce"], capsys)
    assert code == 1 and "--theta" in err


def test_validation_errors(tmp_path, capsys):
    code, _, err = _run(["evaluate", "--controller", str(tmp_path / "missing.bin")], capsys)
    assert code == 2 and str(tmp_path / "missing.bin") in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("[baseline]\nhorizon = 0\n")
    assert _run(["gen-demand", "--config", str(bad)], capsys)[0] == 2
    csv = tmp_path / "neg.csv"
    m = make_even_demand().rates.copy()
    save_od_csv(type(make_even_demand())(m), csv)
    csv.write_text(csv.read_text().replace("36.36363636363637", "-3.0", 1))
    code, _, err = _run(["evaluate", "--controller", "fixed", "--groups", "8",
                         "--heldout", str(csv), "--out", str(tmp_path / "e")], capsys)
    assert code == 2 and "negative" in err


def test_report_fixtures(tmp_path, capsys):
    code, out, _ = _run(["report", "--fixtures", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert out.splitlines()[1].startswith("0,-44.47")
    assert {p.name for p in tmp_path.iterdir()} == {"table1.csv", "table2.csv", "summary.csv"}


def test_end_to_end_tiny(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "run"
    common = ["--config", tiny_cfg, "--out", str(out)]
    assert _run(["train-baseline", *common], capsys)[0] == 0
    theta = out / "baseline.bin"
    assert len((out / "baseline_curve.jsonl").read_text().splitlines()) == 2
    assert _run(["train-wce", *common, "--theta", str(theta)], capsys)[0] == 0
    wce_log = (out / "wce_weights.jsonl").read_text().splitlines()
    assert len(wce_log) == 2 * 1 * 2
    assert _run(["train-drmarl", *common, "--theta", str(theta),
                 "--psi", str(out / "wce.bin")], capsys)[0] == 0
    weights = [json.loads(l) for l in (out / "drmarl_weights.jsonl").read_text().splitlines()]
    assert len(weights) == 2 and abs(sum(weights[0]["weights"]) - 1) <= 1e-9
    for name, ctrl in (("base", theta), ("robust", out / "drmarl.bin")):
        code, text, _ = _run(["evaluate", "--config", tiny_cfg, "--controller", str(ctrl),
                              "--out", str(tmp_path / name), "--trace"], capsys)
        assert code == 0 and text.count("group") == 9
    assert (tmp_path / "base" / "group_8_trace.jsonl").exists()
    code, _, _ = _run(["report", "--config", tiny_cfg, "--baseline", str(tmp_path / "base"),
                       "--robust", str(tmp_path / "robust"), "--out", str(tmp_path / "r")], capsys)
    assert code == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "r").iterdir()}
    _run(["report", "--config", tiny_cfg, "--baseline", str(tmp_path / "base"),
          "--robust", str(tmp_path / "robust"), "--out", str(tmp_path / "r")], capsys)
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "r").iterdir()}
    assert set(first) == {"table1.csv", "table2.csv", "summary.csv", "plot_data.csv"}


def test_cli_determinism(tmp_path, tiny_cfg, capsys):
    for d in ("a", "b"):
        assert _run(["train-baseline", "--config", tiny_cfg, "--out", str(tmp_path / d)],
                    capsys)[0] == 0
    assert (tmp_path / "a" / "baseline.bin").read_bytes() == \
        (tmp_path / "b" / "baseline.bin").read_bytes()


def test_heldout_from_config(tmp_path, capsys):
    rates = make_even_demand().rates.copy()
    rates[0, 1] *= 3
    csv = tmp_path / "ho.csv"
    save_od_csv(type(make_even_demand())(rates), csv)
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + f"[demand]\nheldout_path = {csv}\n")
    code, a, _ = _run(["evaluate", "--config", str(cfg), "--controller", "fixed",
                       "--groups", "8", "--out", str(tmp_path / "x")], capsys)
    code2, b, _ = _run(["evaluate", "--config", str(cfg),
                        "--controller", "fixed", "--groups", "8", "--heldout", str(csv),
                        "--out", str(tmp_path / "y")], capsys)
    assert code == code2 == 0 and a == b


def test_selftest_command(capsys):
    code, out, _ = _run(["selftest"], capsys)
    assert code == 0 and "all checks passed" in out


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "drtsc", "report", "--fixtures", "--out",
                        str(Path("/tmp") / "drtsc_entry")], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("group,")
