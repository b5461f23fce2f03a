import numpy as np
import pytest

from vecoffload.config import load_config
from vecoffload.date import (FULL_LOCAL, FULL_OFFLOAD, ConstantSplit, InfeasibleScenario,
                             Trained, WindowRunner, baseline_calibrate, evaluate_policy,
                             make_env, run_reservation_loop, run_virtualedge,
                             train_policy, window_max_latencies)
from vecoffload.reserve import observe_window

SMALL = [
    "env.n_vehicles=2", "env.episode_length=10",
    "train.transitions_per_epoch=60", "ppo.hidden=16", "ppo.minibatch=32", "ppo.ppo_epochs=2",
    "reserve.warmup_windows=5", "reserve.guided_windows=5", "reserve.window_offloads=20",
    "baseline.grid_step=0.1", "baseline.calibration_windows=2",
]


def small(*extra):
    return load_config(overrides=SMALL + list(extra))


def test_zero_epochs_returns_initial_policy():
    res = train_policy(small(), epochs=0)
    assert res.curve == []
    assert res.policy.fingerprint() == res.initial.fingerprint()


def test_training_is_reproducible():
    a = train_policy(small(), epochs=2)
    b = train_policy(small(), epochs=2)
    assert a.curve == b.curve
    assert a.policy.fingerprint() == b.policy.fingerprint()
    assert a.policy.fingerprint() != a.initial.fingerprint()


def test_constant_policies():
    obs = np.zeros(8)
    assert FULL_OFFLOAD(obs) == 0.0 and FULL_LOCAL(obs) == 1.0
    assert ConstantSplit(0.3)(np.ones(8)) == 0.3


def test_trained_decision_is_greedy_and_bounded():
    res = train_policy(small(), epochs=0)
    d = Trained(res.policy)
    obs = np.full(8, 0.5)
    assert 0.0 <= d(obs) <= 1.0
    assert d(obs) == pytest.approx(float(res.policy.actor.forward(obs)[0]))


def test_window_runner_counts_and_carries():
    env = make_env(small(), seed=1)
    runner = WindowRunner(env, FULL_OFFLOAD)
    seen = []
    for _ in range(4):
        window = runner.run(7)
        assert len(window) == 7
        seen += [t.task_id for t in window]
    assert len(set(seen)) == len(seen)


def test_window_max_matches_event_log_scan():
    cfg = small()
    env = make_env(cfg, seed=2, reservation=(0.5, 0.5, 0.5), record_events=True)
    window = WindowRunner(env, ConstantSplit(0.2)).run(20)
    ids = {t.task_id for t in window}
    created = {r[1]: r[0] for r in env.sim.log.rows if r[4] == "create"}
    completed = {r[1]: r[0] for r in env.sim.log.rows if r[4] == "complete"}
    oracle = max(completed[i] - created[i] for i in ids)
    assert observe_window(t.latency for t in window) == oracle


def test_full_local_stage_breakdown():
    cfg = small()
    out = evaluate_policy(FULL_LOCAL, cfg, [(0.5, 0.5, 0.5)], seed=0)
    for s in out["stages"]:
        assert s.get("edge_queue", 0) == 0 and s.get("edge_compute", 0) == 0
        assert s["local"] > 0 and s["broadcast"] > 0
    assert len(out["latencies"]) == 2 * 10


def test_reservation_loop_phases():
    cfg = small()
    traj = run_reservation_loop(FULL_OFFLOAD, cfg)
    assert len(traj.rows) == 10
    assert [r["phase"] for r in traj.rows] == ["warmup"] * 5 + ["guided"] * 5
    assert traj.rows[5]["lambda"] == 0.0
    assert all(0 <= r[k] <= 1 for r in traj.rows for k in ("x_uplink", "x_downlink", "x_compute"))
    assert len(traj.stages) == 10 * 20


def test_virtualedge_offloads_everything():
    traj = run_virtualedge(small())
    assert all(s.get("local", 0) == 0 for s in traj.stages)
    assert traj.rows == run_reservation_loop(FULL_OFFLOAD, small()).rows


def test_reservation_loop_deterministic():
    a = run_reservation_loop(ConstantSplit(0.1), small())
    b = run_reservation_loop(ConstantSplit(0.1), small())
    assert a.rows == b.rows


def test_baseline_always_feasible_hits_grid_minimum():
    cfg = small("env.latency_max_ms=1e9", "baseline.grid_step=0.02",
                "baseline.calibration_windows=1", "reserve.window_offloads=4")
    cal = baseline_calibrate(FULL_OFFLOAD, cfg)
    assert cal.reservation == pytest.approx((0.02, 0.02, 0.02))


def test_baseline_infeasible_reported():
    with pytest.raises(InfeasibleScenario):
        baseline_calibrate(FULL_OFFLOAD, small("env.latency_max_ms=1"))


def test_baseline_point_feasible_and_next_step_down_not():
    cfg = small()
    cal = baseline_calibrate(FULL_OFFLOAD, cfg)
    x = np.array(cal.reservation)
    step = cfg.baseline.grid_step
    assert np.allclose(np.round(x / step) * step, x)
    assert max(window_max_latencies(FULL_OFFLOAD, cfg, x, cfg.seed)) <= cfg.env.latency_max_ms
    for m in range(3):
        if x[m] > step + 1e-12:
            lower = x.copy()
            lower[m] -= step
            lh = window_max_latencies(FULL_OFFLOAD, cfg, lower, cfg.seed)
            assert max(lh) > cfg.env.latency_max_ms
