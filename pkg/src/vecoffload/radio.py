"""Radio model: UMi street-canyon LOS path loss, shadowing, equal bandwidth sharing.

The simulator needs, for every vehicle and every 1 ms tick, how many bits one
hertz of bandwidth carries.  :class:`RadioChannel` precomputes that as cumulative
spectral efficiency so a transfer's completion tick can be found with a single
``searchsorted`` instead of a per-tick loop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
from scipy.signal import lfilter

SPEED_OF_LIGHT = 299_792_458.0
TICK_S = 1e-3


@dataclass(frozen=True)
class ChannelConfig:
    carrier_frequency_ghz: float = 3.5
    max_bandwidth_uplink_hz: float = 5e6
    max_bandwidth_downlink_hz: float = 5e6
    tx_power_dbm: float = 23.0
    noise_density_dbm_hz: float = -174.0
    noise_figure_db: float = 7.0
    shadowing_sigma_db: float = 4.0
    shadowing_decorrelation_m: float = 10.0
    bs_height_m: float = 10.0
    ut_height_m: float = 1.5
    seed: int = 0

    def __post_init__(self):
        for name in ("carrier_frequency_ghz", "max_bandwidth_uplink_hz",
                     "max_bandwidth_downlink_hz", "shadowing_decorrelation_m",
                     "bs_height_m", "ut_height_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be non-negative")
        if self.bs_height_m <= 1.0 or self.ut_height_m <= 1.0:
            raise ValueError("antenna heights must exceed the 1 m effective environment height")


@dataclass(frozen=True)
class MobilityConfig:
    region_m: float = 200.0
    speed_min: float = 5.0
    speed_max: float = 15.0
    bs_position: tuple[float, float] = (10.0, 10.0)

    def __post_init__(self):
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("need 0 < speed_min <= speed_max")
        if self.region_m <= 0:
            raise ValueError("region_m must be positive")


def breakpoint_distance(cfg: ChannelConfig) -> float:
    h_bs = cfg.bs_height_m - 1.0
    h_ut = cfg.ut_height_m - 1.0
    return 4.0 * h_bs * h_ut * cfg.carrier_frequency_ghz * 1e9 / SPEED_OF_LIGHT


def path_loss_db(distance, cfg: ChannelConfig, rng: np.random.Generator | None = None):
    """UMi street-canyon LOS path loss (dB) at 2D ``distance`` metres.

    Distances below 1 m are clamped to 1 m.  When ``rng`` is given and the
    configured shadowing sigma is positive, a log-normal shadowing term is added.
    """
    d2d = np.maximum(np.asarray(distance, dtype=float), 1.0)
    dh = cfg.bs_height_m - cfg.ut_height_m
    d3d = np.sqrt(d2d ** 2 + dh ** 2)
    fc = cfg.carrier_frequency_ghz
    d_bp = breakpoint_distance(cfg)
    near = 32.4 + 21.0 * np.log10(d3d) + 20.0 * np.log10(fc)
    far = (32.4 + 40.0 * np.log10(d3d) + 20.0 * np.log10(fc)
           - 9.5 * np.log10(d_bp ** 2 + dh ** 2))
    pl = np.where(d2d <= d_bp, near, far)
    if rng is not None and cfg.shadowing_sigma_db > 0:
        pl = pl + rng.normal(0.0, cfg.shadowing_sigma_db, size=np.shape(pl))
    return pl if pl.ndim else float(pl)


def snr_db(pl_db, cfg: ChannelConfig):
    """SNR referenced to the full channel bandwidth, so it depends on path loss only."""
    noise_dbm = (cfg.noise_density_dbm_hz + 10.0 * np.log10(cfg.max_bandwidth_uplink_hz)
                 + cfg.noise_figure_db)
    return cfg.tx_power_dbm - np.asarray(pl_db) - noise_dbm


def spectral_efficiency(snr):
    """Shannon bits/s/Hz for an SNR given in dB."""
    return np.log2(1.0 + 10.0 ** (np.asarray(snr, dtype=float) / 10.0))


def bandwidth_shares(active, reservation: float, max_bandwidth_hz: float) -> dict:
    if not 0.0 <= reservation <= 1.0:
        raise ValueError("reservation must lie in [0, 1]")
    active = sorted(active)
    if not active:
        return {}
    share = reservation * max_bandwidth_hz / len(active)
    return {v: share for v in active}


def per_vehicle_rate(active, reservation: float, positions: Mapping,
                     cfg: ChannelConfig, bs_position=(0.0, 0.0),
                     shadowing_db: Mapping | None = None,
                     max_bandwidth_hz: float | None = None) -> dict:
    """Rate in bit/s for every active vehicle; the reserved band is split equally."""
    bw = cfg.max_bandwidth_uplink_hz if max_bandwidth_hz is None else max_bandwidth_hz
    shares = bandwidth_shares(active, reservation, bw)
    rates = {}
    for v, b in shares.items():
        x, y = positions[v]
        pl = path_loss_db(np.hypot(x - bs_position[0], y - bs_position[1]), cfg)
        if shadowing_db is not None:
            pl += shadowing_db[v]
        rates[v] = float(b * spectral_efficiency(snr_db(pl, cfg)))
    return rates


# --------------------------------------------------------------------------
# mobility


class PositionSource(Protocol):
    n_vehicles: int
    bs_position: tuple[float, float]

    def window(self, t0: int, t1: int) -> tuple[np.ndarray, np.ndarray]:
        """Positions ``(n, t1-t0, 2)`` and speeds ``(n, t1-t0)`` for ticks [t0, t1)."""


class CrossingTraffic:
    """Vehicles shuttling along two perpendicular roads through an intersection.

    Even-indexed vehicles drive east-west, odd-indexed north-south.  Each leg is
    stretched to a whole number of ticks so a vehicle covers exactly
    ``speed * 1 ms`` every tick, turnarounds included.
    """

    def __init__(self, n_vehicles: int, seed: int, cfg: MobilityConfig = MobilityConfig()):
        if n_vehicles < 1:
            raise ValueError("need at least one vehicle")
        rng = np.random.default_rng(seed)
        self.n_vehicles = n_vehicles
        self.bs_position = tuple(cfg.bs_position)
        self.speed = rng.uniform(cfg.speed_min, cfg.speed_max, n_vehicles)
        step = self.speed * TICK_S
        self.leg_ticks = np.maximum(np.round(cfg.region_m / step), 1).astype(np.int64)
        self.leg_m = self.leg_ticks * step
        self.phase = rng.integers(0, 2 * self.leg_ticks)
        self.axis = np.arange(n_vehicles) % 2

    def window(self, t0: int, t1: int):
        t = np.arange(t0, t1, dtype=np.int64)
        p = (self.phase[:, None] + t[None, :]) % (2 * self.leg_ticks[:, None])
        k = self.leg_ticks[:, None]
        s = np.where(p <= k, p, 2 * k - p) * (self.speed * TICK_S)[:, None]
        along = s - self.leg_m[:, None] / 2.0
        pos = np.zeros((self.n_vehicles, t.size, 2))
        ew = self.axis == 0
        pos[ew, :, 0] = along[ew]
        pos[~ew, :, 1] = along[~ew]
        speeds = np.broadcast_to(self.speed[:, None], (self.n_vehicles, t.size)).copy()
        return pos, speeds


@dataclass
class MobilityTrace:
    positions: np.ndarray  # (n_vehicles, n_ticks, 2) metres
    speeds: np.ndarray  # (n_vehicles, n_ticks) m/s
    bs_position: tuple[float, float]

    @property
    def n_vehicles(self) -> int:
        return self.positions.shape[0]

    @property
    def n_ticks(self) -> int:
        return self.positions.shape[1]

    def window(self, t0: int, t1: int):
        # imported traces repeat cyclically past their end
        idx = np.arange(t0, t1) % self.n_ticks
        return self.positions[:, idx], self.speeds[:, idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "vehicle_id", "x", "y", "speed"])
            w.writerow([-1, -1, repr(self.bs_position[0]), repr(self.bs_position[1]), 0.0])
            for t in range(self.n_ticks):
                for v in range(self.n_vehicles):
                    x, y = self.positions[v, t]
                    w.writerow([t, v, repr(float(x)), repr(float(y)), repr(float(self.speeds[v, t]))])

    @classmethod
    def from_csv(cls, path, bs_position=None) -> "MobilityTrace":
        """Read ``tick,vehicle_id,x,y,speed`` rows.  A row with vehicle_id -1 holds the BS position."""
        rows = []
        bs = bs_position
        with open(Path(path), newline="") as fh:
            for rec in csv.DictReader(fh):
                if int(rec["vehicle_id"]) < 0:
                    bs = (float(rec["x"]), float(rec["y"]))
                    continue
                rows.append((int(rec["tick"]), int(rec["vehicle_id"]),
                             float(rec["x"]), float(rec["y"]), float(rec["speed"])))
        if not rows:
            raise ValueError(f"{path}: no trace rows")
        n_t = max(r[0] for r in rows) + 1
        n_v = max(r[1] for r in rows) + 1
        pos = np.full((n_v, n_t, 2), np.nan)
        spd = np.full((n_v, n_t), np.nan)
        for t, v, x, y, s in rows:
            pos[v, t] = (x, y)
            spd[v, t] = s
        if np.isnan(pos).any():
            raise ValueError(f"{path}: trace has missing (tick, vehicle) entries")
        return cls(pos, spd, bs if bs is not None else (0.0, 0.0))


def generate_trace(n_vehicles: int, duration_ms: int, seed: int,
                   cfg: MobilityConfig = MobilityConfig()) -> MobilityTrace:
    src = CrossingTraffic(n_vehicles, seed, cfg)
    pos, spd = src.window(0, int(duration_ms))
    return MobilityTrace(pos, spd, src.bs_position)


# --------------------------------------------------------------------------
# per-tick channel state for the simulator


class RadioChannel:
    """Lazily extended per-tick SNR and cumulative spectral efficiency.

    ``cum_se[v, t - base]`` is the summed spectral efficiency (bit/s/Hz) of
    vehicle ``v`` over ticks ``[0, t)``; ``cum_bc`` is the same for the broadcast
    link, whose efficiency is the worst vehicle's so every receiver decodes it.
    Ticks before ``base`` have been dropped by :meth:`trim`.
    """

    CHUNK = 16_384

    def __init__(self, cfg: ChannelConfig, source: PositionSource, seed: int | None = None):
        self.cfg = cfg
        self.source = source
        self.n = source.n_vehicles
        self._rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self._shadow_state = np.zeros(self.n)
        self._shadow_started = False
        self.base = 0
        self.end = 0
        self.snr = np.zeros((self.n, 0))
        self.speed = np.zeros((self.n, 0))
        self.cum_se = np.zeros((self.n, 1))
        self.cum_bc = np.zeros(1)

    def ensure(self, t_end: int) -> None:
        """Make ticks up to ``t_end`` available."""
        while self.end < t_end:
            self._extend(max(self.CHUNK, (self.end - self.base) // 2))

    def trim(self, keep_from: int) -> None:
        """Forget ticks before ``keep_from`` once enough of them have piled up."""
        drop = keep_from - self.base
        if drop < 4 * self.CHUNK:
            return
        self.snr = self.snr[:, drop:].copy()
        self.speed = self.speed[:, drop:].copy()
        self.cum_se = self.cum_se[:, drop:].copy()
        self.cum_bc = self.cum_bc[drop:].copy()
        self.base = keep_from

    def snr_at(self, v: int, t: int) -> float:
        self.ensure(t + 1)
        return float(self.snr[v, t - self.base])

    def speed_at(self, v: int, t: int) -> float:
        self.ensure(t + 1)
        return float(self.speed[v, t - self.base])

    def _shadowing(self, speeds: np.ndarray) -> np.ndarray:
        sigma = self.cfg.shadowing_sigma_db
        n, m = speeds.shape
        if sigma == 0:
            return np.zeros((n, m))
        if not self._shadow_started:
            self._shadow_state = sigma * self._rng.standard_normal(n)
            self._shadow_started = True
        out = np.empty((n, m))
        z = self._rng.standard_normal((n, m))
        for v in range(n):
            # AR(1) with correlation over the distance driven in one tick
            rho = np.exp(-speeds[v, 0] * TICK_S / self.cfg.shadowing_decorrelation_m)
            gain = np.sqrt(1.0 - rho ** 2) * sigma
            out[v], _ = lfilter([gain], [1.0, -rho], z[v],
                                zi=[rho * self._shadow_state[v]])
            self._shadow_state[v] = out[v, -1]
        return out

    def _extend(self, m: int) -> None:
        t0 = self.end
        pos, spd = self.source.window(t0, t0 + m)
        bx, by = self.source.bs_position
        dist = np.hypot(pos[..., 0] - bx, pos[..., 1] - by)
        snr = snr_db(path_loss_db(dist, self.cfg) + self._shadowing(spd), self.cfg)
        se = spectral_efficiency(snr)
        bc = se.min(axis=0)
        self.snr = np.concatenate([self.snr, snr], axis=1)
        self.speed = np.concatenate([self.speed, spd], axis=1)
        self.cum_se = np.concatenate(
            [self.cum_se, self.cum_se[:, -1:] + np.cumsum(se, axis=1)], axis=1)
        self.cum_bc = np.concatenate([self.cum_bc, self.cum_bc[-1] + np.cumsum(bc)])
        self.end = t0 + m
