"""Two-timescale orchestration: train the shared offloading policy, then run the
reservation controller with that policy frozen.  Also hosts the comparison
schemes (calibrated full-offload baseline, GPR-controlled full offload).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .config import ScenarioConfig
from .env import OffloadEnv
from .marl import PolicyPair, act, collect_rollouts, ppo_update
from .reserve import (EmptyWindow, GprDataset, GprModel, ReservationState, expected_gradient,
                      observe_window, update_reservation, weighted_usage)
from .simcore import STAGE_NAMES, Stage

log = logging.getLogger(__name__)


class Phase(Enum):
    POLICY_TRAINING = "policy_training"
    RESERVATION_LEARNING = "reservation_learning"
    EVALUATION = "evaluation"


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def make_env(cfg: ScenarioConfig, seed: int, n_vehicles: int | None = None,
             reservation=(1.0, 1.0, 1.0), record_events: bool = False) -> OffloadEnv:
    env_cfg = cfg.env if n_vehicles is None else replace(cfg.env, n_vehicles=n_vehicles)
    sim_cfg = replace(cfg.sim, record_events=record_events)
    return OffloadEnv(env_cfg, cfg.channel, cfg.mobility, cfg.workload, sim_cfg,
                      seed=seed, reservation=reservation)


# --------------------------------------------------------------------------
# decision rules


@dataclass(frozen=True)
class ConstantSplit:
    """Fixed split ratio: 0 is full offload, 1 is full local."""

    ratio: float
    name: str = ""

    def __call__(self, obs) -> float:
        return self.ratio


FULL_OFFLOAD = ConstantSplit(0.0, "full_offload")
FULL_LOCAL = ConstantSplit(1.0, "full_local")


class Trained:
    """Greedy (mean) action of a frozen actor."""

    name = "trained"

    def __init__(self, policy: PolicyPair):
        self.policy = policy

    def __call__(self, obs) -> float:
        return float(np.clip(self.policy.actor.forward(obs)[0], 0.0, 1.0))


# --------------------------------------------------------------------------
# phase 1: policy training


def sample_reservation(rng: np.random.Generator, low: float) -> tuple:
    return tuple(float(v) for v in rng.uniform(low, 1.0, 3))


@dataclass
class TrainResult:
    policy: PolicyPair
    initial: PolicyPair
    curve: list = field(default_factory=list)


def train_policy(cfg: ScenarioConfig, epochs: int | None = None, progress=None) -> TrainResult:
    """Alternate rollout collection under random reservations with PPO updates."""
    epochs = cfg.train.epochs if epochs is None else epochs
    seed = cfg.seed
    policy = PolicyPair(cfg.ppo, seed=seed)
    initial = policy.snapshot()
    env = make_env(cfg, seed)
    act_rng = _rng(seed, 1)
    res_rng = _rng(seed, 2)
    upd_rng = _rng(seed, 3)
    seed_rng = _rng(seed, 4)
    low = cfg.train.reservation_low
    result = TrainResult(policy, initial)

    for epoch in range(epochs):
        std = policy.exploration_std(epoch)
        epoch_res = sample_reservation(res_rng, low)
        if cfg.train.reservation_resample == "episode":
            sampler = lambda: sample_reservation(res_rng, low)  # noqa: E731
        else:
            sampler = lambda: epoch_res  # noqa: E731
        seeds = (int(s) for s in iter(lambda: seed_rng.integers(2 ** 63), None))
        batch = collect_rollouts(policy, env, cfg.train.transitions_per_epoch, std, act_rng,
                                 explore=True, episode_seeds=seeds,
                                 reservation_sampler=sampler)
        stats = ppo_update(policy, batch, std, rng=upd_rng)
        row = {
            "epoch": epoch,
            "mean_latency_ms": float(np.mean([t.latency_ms for t in batch])),
            "mean_reward": float(np.mean([t.reward for t in batch])),
            "mean_action": float(np.mean([t.action for t in batch])),
            "clip_fraction": stats.clip_fraction,
            "mean_ratio": stats.mean_ratio,
            "value_loss": stats.value_loss,
            "exploration_std": std,
        }
        result.curve.append(row)
        if progress:
            progress(row)
    return result


def evaluate_policy(decide, cfg: ScenarioConfig, reservations, seed: int,
                    n_vehicles: int | None = None, explore_std: float = 0.0,
                    policy: PolicyPair | None = None) -> dict:
    """Run one episode per reservation; return latencies and stage decomposition.

    With ``explore_std > 0`` actions are drawn like during training (requires
    ``policy``); otherwise ``decide(obs)`` picks them.
    """
    env = make_env(cfg, seed, n_vehicles)
    rng = _rng(seed, 5)
    latencies, stages = [], []
    for i, res in enumerate(reservations):
        env.reset(int(_rng(seed, 6, i).integers(2 ** 63)), res)
        runner = WindowRunner(env, decide, explore_std=explore_std, policy=policy, rng=rng)
        done = runner.run(env.env_cfg.episode_length * env.n_vehicles)
        latencies += [t.latency for t in done]
        stages += [dict(t.stage_ms) for t in done]
    return {"latencies": latencies, "stages": stages}


def stage_breakdown(stages) -> dict:
    names = [STAGE_NAMES[s] for s in Stage if s != Stage.DONE]
    return {n: float(np.mean([s.get(n, 0) for s in stages])) if stages else 0.0 for n in names}


# --------------------------------------------------------------------------
# phase 2: reservation control


class WindowRunner:
    """Keeps every vehicle busy and hands out completions in fixed-size windows."""

    def __init__(self, env: OffloadEnv, decide, explore_std: float = 0.0,
                 policy: PolicyPair | None = None, rng=None):
        self.env = env
        self.decide = decide
        self.explore_std = explore_std
        self.policy = policy
        self.rng = rng
        self._carry = []
        for v in range(env.n_vehicles):
            self._launch(v)

    def _launch(self, v: int) -> None:
        obs = self.env.observe(v)
        if self.explore_std > 0:
            a, *_ = act(self.policy, obs, True, self.rng, self.explore_std)
        else:
            a = self.decide(obs)
        self.env.launch(v, a)

    def run(self, n: int) -> list:
        done = self._carry
        while len(done) < n:
            for task in self.env.wait():
                done.append(task)
                self._launch(task.vehicle_id)
        self._carry = done[n:]
        return done[:n]


@dataclass
class Trajectory:
    rows: list = field(default_factory=list)
    stages: list = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def converged_usage(self, last: int = 20) -> float:
        return float(np.mean(self.column("usage")[-last:]))

    def converged_latency(self, last: int = 20) -> float:
        return float(np.mean(self.column("l_h")[-last:]))


def run_reservation_loop(decide, cfg: ScenarioConfig, seed: int | None = None,
                         n_vehicles: int | None = None) -> Trajectory:
    """Warm-up with random reservations, then GPR-guided primal-dual updates.

    One window is ``window_offloads`` completions under a fixed reservation.
    The guided phase starts from the cheapest warm-up reservation that met the
    latency bound (all ones if none did).
    """
    rc = cfg.reserve
    seed = cfg.seed if seed is None else seed
    unit = rc.latency_unit_ms
    l_max = cfg.env.latency_max_ms
    env = make_env(cfg, seed, n_vehicles)
    runner = WindowRunner(env, decide)
    rng = _rng(seed, 7)
    data = GprDataset.empty(rc.noise_var, rc.max_points)
    state = ReservationState(x=(1.0, 1.0, 1.0), lam=0.0, eta1=rc.eta1, eta2=rc.eta2,
                             tau=rc.tau, latency_max=l_max / unit, weights=rc.weights)
    traj = Trajectory()
    warm = []
    for w in range(rc.warmup_windows + rc.guided_windows):
        guided = w >= rc.warmup_windows
        if not guided:
            x = sample_reservation(rng, rc.warmup_low)
        else:
            if w == rc.warmup_windows:
                feasible = [(weighted_usage(xx, rc.weights), xx) for xx, lh in warm if lh <= l_max]
                start = min(feasible)[1] if feasible else (1.0, 1.0, 1.0)
                state = replace(state, x=start)
            x = state.x
        env.set_reservation(x)
        done = runner.run(rc.window_offloads)
        try:
            l_h = observe_window(t.latency for t in done)
        except EmptyWindow:
            log.warning("window %d had no completions; skipping update", w)
            continue
        data.add(x, l_h)
        grad = np.zeros(3)
        lam_before = state.lam
        if guided:
            model = GprModel(data, standardize=rc.standardize)
            grad = expected_gradient(model, x, rc.tau)
            state = update_reservation(state, grad / unit, l_h / unit, rc.update_rule)
        else:
            warm.append((x, l_h))
        traj.rows.append({
            "window": w, "phase": "guided" if guided else "warmup",
            "x_uplink": x[0], "x_downlink": x[1], "x_compute": x[2],
            "lambda": lam_before, "l_h": l_h, "usage": weighted_usage(x, rc.weights),
            "mean_latency": float(np.mean([t.latency for t in done])),
            "grad_uplink": grad[0], "grad_downlink": grad[1], "grad_compute": grad[2],
        })
        traj.stages.extend(dict(t.stage_ms) for t in done)
    return traj


def run_virtualedge(cfg: ScenarioConfig, seed: int | None = None,
                    n_vehicles: int | None = None) -> Trajectory:
    return run_reservation_loop(FULL_OFFLOAD, cfg, seed, n_vehicles)


# --------------------------------------------------------------------------
# baseline calibration


class InfeasibleScenario(RuntimeError):
    pass


def window_max_latencies(decide, cfg: ScenarioConfig, reservation, seed: int,
                         n_vehicles: int | None = None, windows: int | None = None) -> list:
    """Per-window l_H for a fixed reservation on a fresh, seeded run."""
    windows = cfg.baseline.calibration_windows if windows is None else windows
    env = make_env(cfg, seed, n_vehicles, reservation=tuple(reservation))
    runner = WindowRunner(env, decide)
    return [observe_window(t.latency for t in runner.run(cfg.reserve.window_offloads))
            for _ in range(windows)]


@dataclass
class Calibration:
    reservation: tuple
    usage: float
    max_l_h: float
    evaluations: list = field(default_factory=list)


def baseline_calibrate(decide, cfg: ScenarioConfig, seed: int | None = None,
                       n_vehicles: int | None = None) -> Calibration:
    """Shrink all reservations together from full usage along the grid while the
    latency bound holds in every calibration window, then shrink each resource
    on its own as far as it stays feasible."""
    seed = cfg.seed if seed is None else seed
    step = cfg.baseline.grid_step
    l_max = cfg.env.latency_max_ms
    n_steps = int(round(1.0 / step))
    evals = []

    def feasible(levels) -> bool:
        x = tuple(min(1.0, k * step) for k in levels)
        lh = window_max_latencies(decide, cfg, x, seed, n_vehicles)
        ok = max(lh) <= l_max
        evals.append({"x": x, "x_uplink": x[0], "x_downlink": x[1], "x_compute": x[2],
                      "max_l_h": max(lh), "feasible": ok})
        return ok

    top = (n_steps,) * 3
    if not feasible(top):
        raise InfeasibleScenario("latency bound violated even with every resource at 100%")
    level = n_steps
    while level > 1 and feasible((level - 1,) * 3):
        level -= 1
    levels = [level] * 3
    for m in range(3):
        while levels[m] > 1:
            trial = list(levels)
            trial[m] -= 1
            if not feasible(trial):
                break
            levels = trial
    x = tuple(min(1.0, k * step) for k in levels)
    lh = next(e["max_l_h"] for e in reversed(evals) if e["feasible"] and e["x"] == x)
    return Calibration(x, weighted_usage(x, cfg.reserve.weights), lh, evals)


# --------------------------------------------------------------------------
# fleet-size sweep


def sweep_vehicles(decide, cfg: ScenarioConfig, counts=None, seed: int | None = None) -> list:
    """DATE, VirtualEdge and Baseline usage for each fleet size.

    When no reservation meets the bound with full offloading, Baseline has to
    reserve everything: its usage is recorded as 1.0 with ``baseline_feasible``
    set to False.
    """
    counts = cfg.sweep_vehicles if counts is None else counts
    rows = []
    for n in counts:
        log.info("sweep: %d vehicles", n)
        date = run_reservation_loop(decide, cfg, seed, n_vehicles=n)
        ve = run_virtualedge(cfg, seed, n_vehicles=n)
        try:
            base, feasible = baseline_calibrate(FULL_OFFLOAD, cfg, seed, n_vehicles=n).usage, True
        except InfeasibleScenario:
            base, feasible = 1.0, False
        rows.append({"n_vehicles": n, "date_usage": date.converged_usage(),
                     "date_l_h": date.converged_latency(),
                     "virtualedge_usage": ve.converged_usage(),
                     "virtualedge_l_h": ve.converged_latency(),
                     "baseline_usage": base, "baseline_feasible": feasible,
                     "gap_vs_baseline": base - date.converged_usage()})
    return rows
