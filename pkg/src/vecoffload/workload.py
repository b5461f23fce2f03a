"""Per-offload demand sampling and the linear split-ratio interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KB = 1000.0


@dataclass(frozen=True)
class WorkloadStats:
    # measured on an EuRoC / ORB-SLAM3 mono pipeline (desktop = edge, laptop = vehicle)
    image_bytes_mean: float = 353.5 * KB
    image_bytes_std: float = 22.7 * KB
    edge_full_ms_mean: float = 286.54
    edge_full_ms_std: float = 68.89
    local_full_ms_mean: float = 609.27
    local_full_ms_std: float = 165.44
    update_bytes_mean: float = 50.0 * KB
    update_bytes_std: float = 0.0
    min_uplink_bytes: float = 35.0 * KB

    def __post_init__(self):
        for name in ("image_bytes_mean", "edge_full_ms_mean", "local_full_ms_mean",
                     "update_bytes_mean"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("image_bytes_std", "edge_full_ms_std", "local_full_ms_std",
                     "update_bytes_std", "min_uplink_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class RawDemand:
    """One full-image draw, before the split ratio is applied."""

    image_bytes: float
    local_full_ms: float
    edge_full_ms: float
    update_bytes: float


@dataclass(frozen=True)
class TaskDemands:
    local_ms: float
    uplink_bytes: float
    edge_ms_at_unit_capacity: float
    broadcast_bytes: float


def sample_demands(stats: WorkloadStats, rng: np.random.Generator) -> RawDemand:
    """Draw one offload's raw demands. Consumes exactly four normals from ``rng``."""
    draws = rng.standard_normal(4)
    means = (stats.image_bytes_mean, stats.local_full_ms_mean,
             stats.edge_full_ms_mean, stats.update_bytes_mean)
    stds = (stats.image_bytes_std, stats.local_full_ms_std,
            stats.edge_full_ms_std, stats.update_bytes_std)
    vals = [max(m + s * z, 0.01 * m) for m, s, z in zip(means, stds, draws)]
    return RawDemand(*vals)


def split(demand: RawDemand, a: float, min_uplink_bytes: float) -> TaskDemands:
    """Apply split ratio ``a`` (fraction computed on the vehicle).

    Local time and edge time are interpolated linearly between the all-offload
    and all-local endpoints, as is the uplink payload (raw image at ``a=0``,
    ``min_uplink_bytes`` at ``a=1``). The broadcast payload does not depend on ``a``.
    """
    if not 0.0 <= a <= 1.0 or not np.isfinite(a):
        raise ValueError(f"split ratio must lie in [0, 1], got {a!r}")
    return TaskDemands(
        local_ms=a * demand.local_full_ms,
        uplink_bytes=(1.0 - a) * demand.image_bytes + a * min_uplink_bytes,
        edge_ms_at_unit_capacity=(1.0 - a) * demand.edge_full_ms,
        broadcast_bytes=demand.update_bytes,
    )
