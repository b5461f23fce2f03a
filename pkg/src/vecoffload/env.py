"""Offloading environment: a simulator plus the vehicles' demand streams and profiles.

Each vehicle decides a split ratio when its previous offload completes, so
decisions arrive asynchronously.  :meth:`OffloadEnv.wait` runs the simulator
until at least one offload finishes and hands back the finished tasks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .radio import ChannelConfig, CrossingTraffic, MobilityConfig, RadioChannel
from .simcore import SimConfig, Simulator, Task
from .workload import WorkloadStats, sample_demands, split

OBS_DIM = 8


@dataclass(frozen=True)
class EnvConfig:
    n_vehicles: int = 4
    latency_max_ms: float = 500.0
    episode_length: int = 100
    cpu_ghz_range: tuple[float, float] = (2.0, 3.0)
    reference_cpu_ghz: float = 2.5
    ram_gb_choices: tuple[float, ...] = (4.0, 8.0, 16.0)
    stall_timeout_ticks: int = 600_000
    # normalisation bounds for the observation features
    cpu_ghz_bounds: tuple[float, float] = (1.0, 4.0)
    ram_gb_bounds: tuple[float, float] = (0.0, 32.0)
    speed_bounds: tuple[float, float] = (0.0, 20.0)
    snr_db_bounds: tuple[float, float] = (0.0, 80.0)
    workload_ms_bounds: tuple[float, float] = (0.0, 2000.0)

    def __post_init__(self):
        if self.n_vehicles < 1:
            raise ValueError("n_vehicles must be >= 1")
        if self.latency_max_ms <= 0:
            raise ValueError("latency_max_ms must be positive")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        lo, hi = self.cpu_ghz_range
        if not 0 < lo <= hi:
            raise ValueError("cpu_ghz_range must be positive and ordered")


class SimulatorStalled(RuntimeError):
    pass


def _scale(value: float, bounds) -> float:
    lo, hi = bounds
    return min(1.0, max(0.0, (value - lo) / (hi - lo)))


class OffloadEnv:
    def __init__(self, env: EnvConfig = EnvConfig(), channel: ChannelConfig = ChannelConfig(),
                 mobility: MobilityConfig = MobilityConfig(),
                 workload: WorkloadStats = WorkloadStats(), sim: SimConfig = SimConfig(),
                 seed: int = 0, reservation=(1.0, 1.0, 1.0), source=None):
        self.env_cfg = env
        self.channel_cfg = channel
        self.mobility_cfg = mobility
        self.stats = workload
        self.sim_cfg = sim
        self._source = source
        self.reset(seed, reservation)

    @property
    def n_vehicles(self) -> int:
        return self.env_cfg.n_vehicles

    def reset(self, seed: int, reservation=None) -> None:
        """Fresh mobility, channel, demand streams and vehicle profiles from ``seed``."""
        if reservation is None:
            reservation = self.sim.reservation
        n = self.env_cfg.n_vehicles
        ss = np.random.SeedSequence(seed)
        trace_seed, shadow_seed, profile_seed, demand_seed = ss.spawn(4)
        src = self._source
        if src is None:
            src = CrossingTraffic(n, int(trace_seed.generate_state(1)[0]), self.mobility_cfg)
        if src.n_vehicles != n:
            raise ValueError("trace vehicle count does not match the scenario")
        self.channel = RadioChannel(self.channel_cfg, src,
                                    seed=int(shadow_seed.generate_state(1)[0]))
        self.sim = Simulator(n, self.channel, self.sim_cfg, reservation)
        prng = np.random.default_rng(profile_seed)
        lo, hi = self.env_cfg.cpu_ghz_range
        self.cpu_ghz = prng.uniform(lo, hi, n)
        self.ram_gb = prng.choice(np.asarray(self.env_cfg.ram_gb_choices, dtype=float), n)
        # one independent demand stream per vehicle keeps paired runs comparable
        self._demand_rngs = [np.random.default_rng(s) for s in demand_seed.spawn(n)]
        self.completed_count = 0

    def set_reservation(self, reservation) -> None:
        self.sim.set_reservation(reservation)

    @property
    def now(self) -> int:
        return self.sim.now

    def observe(self, v: int) -> np.ndarray:
        """Normalised 8-feature observation of vehicle ``v`` (previous-tick values)."""
        e = self.env_cfg
        t = max(self.sim.now - 1, 0)
        x = self.sim.reservation
        return np.array([
            _scale(self.cpu_ghz[v], e.cpu_ghz_bounds),
            _scale(self.ram_gb[v], e.ram_gb_bounds),
            _scale(self.channel.speed_at(v, t), e.speed_bounds),
            _scale(self.channel.snr_at(v, t), e.snr_db_bounds),
            _scale(self.sim.server_workload_ms(), e.workload_ms_bounds),
            x[0], x[1], x[2],
        ])

    def launch(self, v: int, split_ratio: float) -> Task:
        raw = sample_demands(self.stats, self._demand_rngs[v])
        d = split(raw, float(split_ratio), self.stats.min_uplink_bytes)
        # local time was measured on the reference CPU
        d = type(d)(d.local_ms * self.env_cfg.reference_cpu_ghz / self.cpu_ghz[v],
                    d.uplink_bytes, d.edge_ms_at_unit_capacity, d.broadcast_bytes)
        task = self.sim.start_offload(v, split_ratio, d)
        return task

    def wait(self) -> list[Task]:
        """Advance until at least one offload completes."""
        start = self.sim.now
        while True:
            done = self.sim.advance(self.env_cfg.stall_timeout_ticks)
            if done:
                self.completed_count += len(done)
                return done
            if self.sim.now - start >= self.env_cfg.stall_timeout_ticks:
                raise SimulatorStalled(
                    f"no offload completed in {self.sim.now - start} ticks "
                    f"(reservation {self.sim.reservation}, in flight {len(self.sim.tasks)})")
