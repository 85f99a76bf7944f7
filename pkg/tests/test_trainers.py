import json
from dataclasses import replace

import numpy as np
import pytest

from drtsc.config import RunConfig, TrainConfig
from drtsc.controllers import FixedCycleController
from drtsc.demand import make_scenario_set
from drtsc.microsim import SimState
from drtsc.policy import load_policy, mixture_policy, phase_policy
from drtsc.trainers import (
    ReplayBuffer,
    Transition,
    _learning_signal,
    context_baseline,
    phase_buffer,
    train_baseline,
    train_drmarl,
    train_wce,
    warmup,
)

SC = make_scenario_set(0)


def _tiny(**over) -> RunConfig:
    cfg = RunConfig(
        baseline=TrainConfig(horizon=20, rollouts=2, iterations=2, minibatch=64, epochs=2,
                             surrogate="clip"),
        wce=TrainConfig(horizon=40, window=20, warmup=10, rollouts=2, iterations=2,
                        batch_size=4, buffer_capacity=16, learning_rate=0.01),
        drmarl=TrainConfig(horizon=40, window=20, warmup=10, rollouts=2, iterations=2),
    )
    return replace(cfg, **over).validate()


def _theta():
    return phase_policy(np.random.default_rng(0))


def test_zero_iterations_leave_policies_unchanged():
    cfg = _tiny()
    th = _theta()
    out = train_baseline(replace(cfg, baseline=replace(cfg.baseline, iterations=0)), th.copy())
    assert out.policy.params.tobytes() == th.params.tobytes()
    psi = mixture_policy(np.random.default_rng(1))
    out = train_wce(replace(cfg, wce=replace(cfg.wce, iterations=0)), th, SC, psi.copy())
    assert out.policy.params.tobytes() == psi.params.tobytes()
    out = train_drmarl(replace(cfg, drmarl=replace(cfg.drmarl, iterations=0)), th, psi, SC)
    assert out.policy.params.tobytes() == th.params.tobytes()


def test_baseline_records_and_curve(tmp_path):
    cfg = _tiny()
    res = train_baseline(cfg, _theta(), out_dir=tmp_path, log_path=tmp_path / "c.jsonl")
    tc = cfg.baseline
    assert [r["records"] for r in res.curve] == [tc.horizon * tc.rollouts * 9] * tc.iterations
    lines = [json.loads(l) for l in (tmp_path / "c.jsonl").read_text().splitlines()]
    assert len(lines) == tc.iterations
    assert set(lines[0]) == {"iteration", "records", "mean_return", "mean_queue",
                             "mean_speed", "wall_time"}
    assert (tmp_path / "baseline.bin").exists()
    assert not np.array_equal(res.policy.params, _theta().params)


def test_baseline_paper_scale_record_count():
    from drtsc.config import load_config

    tc = load_config("paper").baseline
    assert tc.horizon * tc.rollouts == 9000


def test_periodic_checkpoints(tmp_path):
    cfg = _tiny()
    cfg = replace(cfg, baseline=replace(cfg.baseline, iterations=4, checkpoint_every=2))
    train_baseline(cfg, _theta(), out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["baseline.bin", "baseline_it0002.bin", "baseline_it0004.bin"]


def test_baseline_deterministic(tmp_path):
    cfg = _tiny()
    a = train_baseline(cfg, _theta(), out_dir=tmp_path / "a")
    b = train_baseline(cfg, _theta(), out_dir=tmp_path / "b")
    assert a.policy.params.tobytes() == b.policy.params.tobytes()
    assert (tmp_path / "a" / "baseline.bin").read_bytes() == \
        (tmp_path / "b" / "baseline.bin").read_bytes()
    assert [r["mean_queue"] for r in a.curve] == [r["mean_queue"] for r in b.curve]


def test_wce_keeps_theta_and_logs_windows(tmp_path, monkeypatch):
    applied = []
    orig = SimState.set_demand

    def spy(self, od):
        applied.append(od.total())
        orig(self, od)

    monkeypatch.setattr(SimState, "set_demand", spy)
    cfg = _tiny()
    th = _theta()
    before = th.params.copy()
    res = train_wce(cfg, th, SC, mixture_policy(np.random.default_rng(1)), out_dir=tmp_path)
    assert th.params.tobytes() == before.tobytes()
    tc = cfg.wce
    n_win = tc.horizon // tc.window
    assert len(res.weights_log) == tc.iterations * tc.rollouts * n_win
    assert [r["records"] for r in res.curve] == [tc.rollouts * n_win] * tc.iterations
    # warm-up mixture plus one mixture per window, every one inside the hull
    assert len(applied) == tc.iterations * tc.rollouts * (n_win + 1)
    assert np.allclose(applied, 5000.0, atol=1e-6)
    for *_, w in res.weights_log:
        assert abs(sum(w) - 1) <= 1e-9 and min(w) >= 0
    assert load_policy(tmp_path / "wce.bin").params.tobytes() == res.policy.params.tobytes()


def test_wce_deterministic():
    cfg = _tiny()
    a = train_wce(cfg, _theta(), SC, mixture_policy(np.random.default_rng(1)))
    b = train_wce(cfg, _theta(), SC, mixture_policy(np.random.default_rng(1)))
    assert a.policy.params.tobytes() == b.policy.params.tobytes()


def test_drmarl_keeps_psi_and_counts_records():
    cfg = _tiny()
    psi = mixture_policy(np.random.default_rng(1))
    before = psi.params.copy()
    res = train_drmarl(cfg, _theta(), psi, SC)
    assert psi.params.tobytes() == before.tobytes()
    tc = cfg.drmarl
    assert [r["records"] for r in res.curve] == [tc.horizon * tc.rollouts * 9] * tc.iterations


def test_drmarl_one_hot_stub(monkeypatch):
    applied = []
    orig = SimState.set_demand

    def spy(self, od):
        applied.append(od.rates.copy())
        orig(self, od)

    monkeypatch.setattr(SimState, "set_demand", spy)
    cfg = _tiny()
    e0 = np.eye(8)[0]
    res = train_drmarl(cfg, _theta(), lambda x, rng: e0, SC)
    assert all(w == e0.tolist() for *_, w in res.weights_log)
    n_win = cfg.drmarl.horizon // cfg.drmarl.window
    window_demands = [m for k, m in enumerate(applied) if k % (n_win + 1)]
    assert window_demands and all((m == SC[0].rates).all() for m in window_demands)


def test_warmup_examples():
    ctrl = FixedCycleController()
    s = SimState(3)
    assert warmup(s, SC, np.random.default_rng(0), 0, ctrl.act) is s
    assert s.clock == 0 and s.n_in_network == 0
    a = warmup(SimState(3), SC, np.random.default_rng(0), 300, ctrl.act)
    b = warmup(SimState(3), SC, np.random.default_rng(0), 300, ctrl.act)
    assert a.clock == 300 and a.n_in_network > 0
    assert abs(a.demand.total() - 5000.0) <= 1e-6
    assert a.pos.tobytes() == b.pos.tobytes() and a.vid.tobytes() == b.vid.tobytes()
    with pytest.raises(ValueError):
        warmup(SimState(3), SC, np.random.default_rng(0), -1, ctrl.act)


def test_window_must_divide_horizon():
    from drtsc.config import ConfigError

    with pytest.raises(ConfigError):
        TrainConfig(horizon=1000, window=600).validate(windowed=True)


def _signal_oracle(rewards, credit, mode, gamma, baseline):
    R, T, N = rewards.shape
    out = np.zeros_like(rewards)
    for k in range(R):
        for i in range(N):
            for t in range(T):
                if credit == "team":
                    r = [rewards[k, s].sum() for s in range(T)]
                else:
                    r = [rewards[k, s, i] for s in range(T)]
                out[k, t, i] = (r[t] if mode == "immediate"
                                else sum(gamma ** (s - t) * r[s] for s in range(t, T)))
    if baseline == "time":
        out = out - out.mean(axis=0, keepdims=True)
    return out


@pytest.mark.parametrize("credit", ["team", "local"])
@pytest.mark.parametrize("mode", ["immediate", "discounted"])
@pytest.mark.parametrize("baseline", ["none", "time"])
def test_learning_signal_against_loops(credit, mode, baseline):
    rewards = np.random.default_rng(0).normal(size=(3, 12, 9))
    tc = TrainConfig(credit=credit, return_mode=mode, gamma_return=0.9, baseline=baseline)
    expect = _signal_oracle(rewards, credit, mode, 0.9, baseline)
    assert np.allclose(_learning_signal(rewards, tc), expect, atol=1e-12)


def test_buffer_fifo_and_sampling():
    buf = ReplayBuffer(5, {"x": (), "y": (2,)})
    for k in range(7):
        buf.add_batch(x=[k], y=[[k, -k]])
    assert len(buf) == 5
    assert buf.column("x").tolist() == [2, 3, 4, 5, 6]
    buf.add_batch(x=np.arange(10, 22), y=np.zeros((12, 2)))
    assert buf.column("x").tolist() == [17, 18, 19, 20, 21]
    rng = np.random.default_rng(0)
    s = buf.sample(3, rng)
    assert len(set(s["x"].tolist())) == 3 and set(s["x"]) <= set(range(17, 22))
    assert sorted(buf.sample(0, rng)["x"].tolist()) == [17, 18, 19, 20, 21]
    with pytest.raises(ValueError):
        ReplayBuffer(0, {"x": ()})
    with pytest.raises(ValueError):
        ReplayBuffer(3, {"x": ()}).sample(1, rng)
    with pytest.raises(ValueError):
        buf.add_batch(x=[1])


def test_phase_buffer_accepts_transition():
    buf = phase_buffer(4)
    t = Transition(np.zeros(79), 3, 1.5, np.ones(79))
    buf.add_batch(obs=[t.obs], action=[t.action], reward=[t.reward],
                  next_obs=[t.next_obs], logp=[0.0])
    assert buf.column("action").tolist() == [3]
    assert buf.column("next_obs").shape == (1, 79)


def test_context_baseline_recovers_affine_rewards():
    rng = np.random.default_rng(0)
    x = rng.random((256, 18))
    beta = rng.normal(size=19)
    r = x @ beta[:18] + beta[18]
    fit = context_baseline(x, r, ridge=0.0)
    assert np.allclose(fit, beta, atol=1e-9)
    # ridge shrinks toward zero but stays close for a small penalty
    assert np.abs(context_baseline(x, r, ridge=1e-6) - beta).max() < 1e-2


def test_context_baseline_config():
    from drtsc.config import ConfigError

    cfg = _tiny()
    replace(cfg, wce=replace(cfg.wce, baseline="context")).validate()
    with pytest.raises(ConfigError, match="estimator only"):
        replace(cfg, baseline=replace(cfg.baseline, baseline="context")).validate()


def test_wce_epochs_take_more_steps():
    cfg = _tiny()
    psi0 = mixture_policy(np.random.default_rng(1))
    one = train_wce(cfg, _theta(), SC, psi0.copy()).policy
    three = train_wce(replace(cfg, wce=replace(cfg.wce, epochs=3, baseline="context")),
                      _theta(), SC, psi0.copy()).policy
    assert not np.array_equal(one.params, three.params)
    assert np.isfinite(three.params).all()
