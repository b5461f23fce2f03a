"""Asynchronous multi-agent PPO with one actor-critic shared by every vehicle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import OBS_DIM, OffloadEnv
from .neural import Mlp, make_optimizer

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PpoConfig:
    hidden: int = 128
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    optimizer: str = "adam"
    clip_eps: float = 0.2
    gamma: float = 0.95
    gae_lambda: float | None = None
    ppo_epochs: int = 10
    minibatch: int = 256
    std_initial: float = 0.3
    std_final: float = 0.05
    std_decay_epochs: int = 80

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.std_initial <= 0 or self.std_final <= 0:
            raise ValueError("exploration std must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class PolicyPair:
    """Shared actor (sigmoid mean of the split ratio) and critic (state value)."""

    def __init__(self, cfg: PpoConfig = PpoConfig(), seed: int = 0,
                 actor: Mlp | None = None, critic: Mlp | None = None):
        self.cfg = cfg
        h = cfg.hidden
        self.actor = actor or Mlp.init((OBS_DIM, h, h, 1), "sigmoid", seed=seed)
        self.critic = critic or Mlp.init((OBS_DIM, h, h, 1), "identity", seed=seed + 1)
        self.actor_opt = make_optimizer(cfg.optimizer, self.actor, cfg.actor_lr)
        self.critic_opt = make_optimizer(cfg.optimizer, self.critic, cfg.critic_lr)

    def exploration_std(self, epoch: int) -> float:
        c = self.cfg
        if c.std_decay_epochs <= 0:
            return c.std_final
        frac = min(1.0, max(0.0, epoch / c.std_decay_epochs))
        return c.std_initial + frac * (c.std_final - c.std_initial)

    def snapshot(self) -> "PolicyPair":
        return PolicyPair(self.cfg, actor=self.actor.copy(), critic=self.critic.copy())

    def fingerprint(self) -> bytes:
        return b"".join(p.tobytes() for p in self.actor.params() + self.critic.params())

    def to_dict(self) -> dict:
        return {"actor": self.actor.to_dict(), "critic": self.critic.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, cfg: PpoConfig = PpoConfig()) -> "PolicyPair":
        return cls(cfg, actor=Mlp.from_dict(d["actor"]), critic=Mlp.from_dict(d["critic"]))


def gaussian_logp(u, mean, std):
    z = (np.asarray(u) - mean) / std
    return -0.5 * z * z - math.log(std) - LOG_SQRT_2PI


def act(policy: PolicyPair, obs, explore: bool, rng: np.random.Generator | None,
        std: float):
    """Return ``(action, log_prob, value, pre_clip_sample)``.

    When exploring, the sample is ``mean + N(0, std)`` and the action is that
    sample clipped to [0, 1]; the log-probability is that of the unclipped
    Gaussian sample.  Without exploration the action is the mean itself.
    """
    mean = float(policy.actor.forward(obs)[0])
    value = float(policy.critic.forward(obs)[0])
    u = mean + std * float(rng.standard_normal()) if explore else mean
    a = min(1.0, max(0.0, u))
    return a, float(gaussian_logp(u, mean, std)), value, u


def reward(latency_ms: float, latency_max_ms: float) -> float:
    if latency_ms < 0:
        raise ValueError("latency must be non-negative")
    return -latency_ms / latency_max_ms


@dataclass
class Transition:
    obs: np.ndarray
    action: float
    raw_action: float
    reward: float
    next_obs: np.ndarray
    log_prob: float
    value: float
    done: bool
    vehicle_id: int
    tick: int
    latency_ms: float = 0.0
    next_value: float = 0.0


def advantages(batch, gamma: float, gae_lambda: float | None = None):
    """Per-transition advantages and returns, in batch order.

    Returns are discounted along each vehicle's own decision sequence (batch
    order within a vehicle).  A sequence cut off without ``done`` bootstraps
    from ``next_value``.  With ``gae_lambda`` set, GAE replaces Monte Carlo.
    """
    if not batch:
        raise ValueError("empty batch")
    adv = np.zeros(len(batch))
    ret = np.zeros(len(batch))
    by_vehicle: dict[int, list[int]] = {}
    for i, tr in enumerate(batch):
        by_vehicle.setdefault(tr.vehicle_id, []).append(i)
    for idx in by_vehicle.values():
        g = 0.0
        gae = 0.0
        next_v = 0.0
        for j, i in enumerate(reversed(idx)):
            tr = batch[i]
            if tr.done:
                g, gae, next_v = 0.0, 0.0, 0.0
            elif j == 0:
                g, next_v = tr.next_value, tr.next_value
            g = tr.reward + gamma * g
            if gae_lambda is None:
                ret[i] = g
                adv[i] = g - tr.value
            else:
                delta = tr.reward + gamma * next_v - tr.value
                gae = delta + gamma * gae_lambda * gae
                adv[i] = gae
                ret[i] = gae + tr.value
            next_v = tr.value
    return adv, ret


def clipped_surrogate(ratio, adv, eps: float):
    """Elementwise ``min(g*A, clip(g, 1-eps, 1+eps)*A)``."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


class PpoDiverged(FloatingPointError):
    pass


@dataclass
class UpdateStats:
    mean_ratio: float = 1.0
    clip_fraction: float = 0.0
    surrogate: float = 0.0
    value_loss: float = 0.0
    initial_mean_ratio: float = 1.0
    initial_surrogate: float = 0.0
    steps: int = 0
    history: list = field(default_factory=list)


def ppo_update(policy: PolicyPair, batch, std: float, epochs: int | None = None,
               minibatch: int | None = None, rng: np.random.Generator | None = None
               ) -> UpdateStats:
    """Clipped-surrogate actor ascent plus squared-error critic descent, in place."""
    cfg = policy.cfg
    epochs = cfg.ppo_epochs if epochs is None else epochs
    minibatch = cfg.minibatch if minibatch is None else minibatch
    rng = rng or np.random.default_rng(0)
    obs = np.stack([t.obs for t in batch])
    u = np.array([t.raw_action for t in batch])
    old_logp = np.array([t.log_prob for t in batch])
    adv, ret = advantages(batch, cfg.gamma, cfg.gae_lambda)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    mean0 = policy.actor.forward(obs)[:, 0]
    ratio0 = np.exp(gaussian_logp(u, mean0, std) - old_logp)
    stats = UpdateStats(initial_mean_ratio=float(ratio0.mean()),
                        initial_surrogate=float(clipped_surrogate(ratio0, adv, cfg.clip_eps).mean()))

    saved = (policy.actor.copy(), policy.critic.copy())
    n = len(batch)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, minibatch):
            mb = order[s:s + minibatch]
            m = len(mb)
            mean, tape = policy.actor.forward(obs[mb], tape=True)
            mean = mean[:, 0]
            ratio = np.exp(gaussian_logp(u[mb], mean, std) - old_logp[mb])
            a = adv[mb]
            unclipped = ratio * a
            clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * a
            surr = np.minimum(unclipped, clipped)
            v, vtape = policy.critic.forward(obs[mb], tape=True)
            v = v[:, 0]
            vloss = float(np.mean((v - ret[mb]) ** 2))
            if not (np.isfinite(surr).all() and math.isfinite(vloss)):
                policy.actor, policy.critic = saved
                raise PpoDiverged(f"non-finite loss after {stats.steps} minibatch steps")
            # gradient flows only where the unclipped term is the active minimum
            active = unclipped <= clipped
            dlogp_dmean = (u[mb] - mean) / (std * std)
            g_mean = np.where(active, a * ratio * dlogp_dmean, 0.0) / m
            policy.actor_opt.step(policy.actor, policy.actor.backward(tape, g_mean[:, None]),
                                  ascent=True)
            g_v = 2.0 * (v - ret[mb]) / m
            policy.critic_opt.step(policy.critic, policy.critic.backward(vtape, g_v[:, None]))
            stats.steps += 1
            stats.history.append((float(surr.mean()), vloss))
            stats.clip_fraction = float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps))
            stats.mean_ratio = float(ratio.mean())
            stats.surrogate = float(surr.mean())
            stats.value_loss = vloss
    return stats


def collect_rollouts(policy: PolicyPair, env: OffloadEnv, n_transitions: int, std: float,
                     rng: np.random.Generator, explore: bool = True,
                     episode_seeds=None, reservation_sampler=None,
                     on_episode=None) -> list[Transition]:
    """Run the frozen ``policy`` on ``env`` until ``n_transitions`` offloads finish.

    Every vehicle decides once at episode start and again each time its offload
    completes.  An episode lasts ``episode_length * n_vehicles`` completions;
    the last transition of each vehicle in an episode is marked ``done``.
    ``episode_seeds`` yields the seed for each episode reset and
    ``reservation_sampler`` (if given) picks each episode's reservation.
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    frozen = policy.fingerprint()
    n = env.n_vehicles
    ep_len = env.env_cfg.episode_length * n
    l_max = env.env_cfg.latency_max_ms
    batch: list[Transition] = []
    if episode_seeds is None:
        episode_seeds = iter(lambda: int(rng.integers(2 ** 63)), None)
    seeds = iter(episode_seeds)

    while len(batch) < n_transitions:
        res = reservation_sampler() if reservation_sampler else None
        env.reset(next(seeds), res)
        if on_episode is not None:
            on_episode(env)
        pending = {}
        for v in range(n):
            obs = env.observe(v)
            a, lp, val, u = act(policy, obs, explore, rng, std)
            env.launch(v, a)
            pending[v] = (obs, a, u, lp, val, env.now)
        last_idx: dict[int, int] = {}
        count = 0
        while count < ep_len and len(batch) < n_transitions:
            for task in env.wait():
                v = task.vehicle_id
                obs, a, u, lp, val, tick = pending.pop(v)
                nobs = env.observe(v)
                tr = Transition(obs, a, u, reward(task.latency, l_max), nobs, lp, val,
                                False, v, tick, float(task.latency))
                last_idx[v] = len(batch)
                batch.append(tr)
                count += 1
                a2, lp2, val2, u2 = act(policy, nobs, explore, rng, std)
                tr.next_value = val2
                env.launch(v, a2)
                pending[v] = (nobs, a2, u2, lp2, val2, env.now)
        if count >= ep_len:
            for i in last_idx.values():
                batch[i].done = True
    if policy.fingerprint() != frozen:
        raise RuntimeError("policy parameters changed during rollout collection")
    return batch[:n_transitions]
