"""Deterministic 1 ms time-driven offloading engine.

Every offload walks LocalCompute -> Uplink -> EdgeQueue -> EdgeCompute ->
Broadcast -> Done.  A stage with nothing to do is skipped; otherwise the task
spends a whole number of ticks in it and moves on at the tick boundary where
its counter runs out.

:meth:`Simulator.advance` jumps straight to the next tick at which any stage
ends.  Between such ticks nothing changes except the counters, so the result
is the same as calling :meth:`Simulator.step` tick by tick (the tests check
this) while costing one iteration per event instead of one per millisecond.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .radio import TICK_S, RadioChannel, bandwidth_shares
from .workload import TaskDemands

# completion tolerances against float round-off in the counters
EPS_MS = 1e-9
EPS_BYTES = 1e-6


class Stage(IntEnum):
    LOCAL_COMPUTE = 0
    UPLINK = 1
    EDGE_QUEUE = 2
    EDGE_COMPUTE = 3
    BROADCAST = 4
    DONE = 5


STAGE_NAMES = {
    Stage.LOCAL_COMPUTE: "local",
    Stage.UPLINK: "uplink",
    Stage.EDGE_QUEUE: "edge_queue",
    Stage.EDGE_COMPUTE: "edge_compute",
    Stage.BROADCAST: "broadcast",
    Stage.DONE: "done",
}


@dataclass(eq=False)
class Task:
    task_id: int
    vehicle_id: int
    created_at: int
    split_ratio: float
    remaining_local_ms: float
    uplink_bytes_remaining: float
    remaining_edge_ms_at_unit_capacity: float
    broadcast_bytes_remaining: float
    stage: Stage = Stage.LOCAL_COMPUTE
    completed_at: int | None = None
    queue_index: int | None = None
    entered_at: int = 0
    stage_ms: dict = field(default_factory=dict)

    @property
    def latency(self) -> int | None:
        if self.completed_at is None:
            return None
        return self.completed_at - self.created_at


@dataclass(frozen=True)
class SimConfig:
    n_queues: int = 4
    max_speedup: float = 10.0
    # reservations below this floor are served as if they were the floor,
    # otherwise a zero reservation stalls every transfer forever
    min_fraction: float = 0.01
    record_events: bool = True

    def __post_init__(self):
        if self.n_queues < 1:
            raise ValueError("n_queues must be >= 1")
        if self.max_speedup <= 0:
            raise ValueError("max_speedup must be positive")
        if not 0 < self.min_fraction <= 1:
            raise ValueError("min_fraction must lie in (0, 1]")


class EdgeServer:
    def __init__(self, n_queues: int = 4, compute_capacity: float = 1.0,
                 max_speedup: float = 10.0):
        self.queues: list[deque[Task]] = [deque() for _ in range(n_queues)]
        self.compute_capacity = compute_capacity
        self.max_speedup = max_speedup

    def speedup(self, floor: float = 0.0) -> float:
        """Unit-capacity milliseconds of work a busy queue completes per tick."""
        return max(self.compute_capacity, floor) * self.max_speedup

    def loads(self) -> list[float]:
        return [sum(t.remaining_edge_ms_at_unit_capacity for t in q) for q in self.queues]

    def total_load(self) -> float:
        return float(sum(self.loads()))


def schedule_edge(task: Task, server: EdgeServer) -> int:
    """Min-load queue choice; ties go to the lowest index."""
    if task.stage != Stage.EDGE_QUEUE:
        raise ValueError(f"task {task.task_id} is in {task.stage.name}, not EDGE_QUEUE")
    loads = server.loads()
    return int(np.argmin(loads))


@dataclass
class EventLog:
    """(tick, task_id, vehicle_id, stage, event) rows in emission order."""

    rows: list = field(default_factory=list)

    def add(self, tick: int, task: Task, stage: Stage, event: str) -> None:
        self.rows.append((tick, task.task_id, task.vehicle_id, STAGE_NAMES[stage], event))

    def stage_durations(self) -> dict[int, dict[str, int]]:
        """Replay the log into per-task, per-stage durations."""
        open_at: dict[tuple[int, str], int] = {}
        out: dict[int, dict[str, int]] = {}
        for tick, tid, _vid, stage, event in self.rows:
            if event == "enter":
                open_at[(tid, stage)] = tick
            elif event == "exit":
                start = open_at.pop((tid, stage))
                d = out.setdefault(tid, {})
                d[stage] = d.get(stage, 0) + tick - start
        return out

    def latencies(self) -> dict[int, int]:
        created, done = {}, {}
        for tick, tid, _vid, stage, event in self.rows:
            if event == "create":
                created[tid] = tick
            elif event == "complete":
                done[tid] = tick
        return {tid: done[tid] - created[tid] for tid in done}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "task_id", "vehicle_id", "stage", "event"])
            w.writerows(self.rows)


class Simulator:
    """Mutable world state: clock, in-flight tasks, edge queues, reservation."""

    def __init__(self, n_vehicles: int, channel: RadioChannel,
                 cfg: SimConfig = SimConfig(), reservation=(1.0, 1.0, 1.0)):
        if channel.n != n_vehicles:
            raise ValueError("channel and simulator disagree on the vehicle count")
        self.n_vehicles = n_vehicles
        self.channel = channel
        self.cfg = cfg
        self.now = 0
        self.server = EdgeServer(cfg.n_queues, 1.0, cfg.max_speedup)
        self.tasks: dict[int, Task] = {}
        self.log = EventLog() if cfg.record_events else None
        self._next_id = 0
        # optional hook(sim, uplink_alloc, broadcast_alloc) called once per advance
        self.on_allocation = None
        self.set_reservation(reservation)

    # --- control -----------------------------------------------------------

    def set_reservation(self, reservation) -> None:
        x = np.asarray(reservation, dtype=float)
        if x.shape != (3,) or not np.all((x >= 0) & (x <= 1)):
            raise ValueError(f"reservation must be three fractions in [0, 1], got {reservation!r}")
        self.reservation = tuple(float(v) for v in x)
        self.server.compute_capacity = self.reservation[2]

    def start_offload(self, vehicle_id: int, split_ratio: float, demands: TaskDemands,
                      now: int | None = None) -> Task:
        if vehicle_id in self.tasks:
            raise ValueError(f"vehicle {vehicle_id} already has an offload in flight")
        if not 0 <= vehicle_id < self.n_vehicles:
            raise ValueError(f"unknown vehicle {vehicle_id}")
        if now is not None and now != self.now:
            raise ValueError(f"offloads start at the current tick {self.now}, not {now}")
        task = Task(
            task_id=self._next_id, vehicle_id=vehicle_id, created_at=self.now,
            split_ratio=float(split_ratio),
            remaining_local_ms=demands.local_ms,
            uplink_bytes_remaining=demands.uplink_bytes,
            remaining_edge_ms_at_unit_capacity=demands.edge_ms_at_unit_capacity,
            broadcast_bytes_remaining=demands.broadcast_bytes,
        )
        self._next_id += 1
        self.tasks[vehicle_id] = task
        if self.log is not None:
            self.log.add(self.now, task, Stage.LOCAL_COMPUTE, "create")
        self._enter(task, Stage.LOCAL_COMPUTE)
        if task.stage == Stage.DONE:
            # nothing to do at all: completes on creation
            del self.tasks[vehicle_id]
        return task

    # --- stage bookkeeping -------------------------------------------------

    def _has_work(self, task: Task, stage: Stage) -> bool:
        if stage == Stage.LOCAL_COMPUTE:
            return task.remaining_local_ms > EPS_MS
        if stage == Stage.UPLINK:
            return task.uplink_bytes_remaining > EPS_BYTES
        if stage == Stage.EDGE_QUEUE:
            return task.remaining_edge_ms_at_unit_capacity > EPS_MS
        if stage == Stage.BROADCAST:
            return task.broadcast_bytes_remaining > EPS_BYTES
        return True

    def _enter(self, task: Task, stage: Stage) -> None:
        while stage != Stage.DONE and not self._has_work(task, stage):
            self._zero(task, stage)
            stage = Stage.BROADCAST if stage == Stage.EDGE_QUEUE else Stage(stage + 1)
        task.stage = stage
        task.entered_at = self.now
        if stage == Stage.DONE:
            task.completed_at = self.now
            if self.log is not None:
                self.log.add(self.now, task, Stage.DONE, "complete")
            return
        if self.log is not None:
            self.log.add(self.now, task, stage, "enter")
        if stage == Stage.EDGE_QUEUE:
            q = schedule_edge(task, self.server)
            task.queue_index = q
            self.server.queues[q].append(task)
            if len(self.server.queues[q]) == 1:
                self._exit(task)
                self._enter_head(task)

    def _enter_head(self, task: Task) -> None:
        task.stage = Stage.EDGE_COMPUTE
        task.entered_at = self.now
        if self.log is not None:
            self.log.add(self.now, task, Stage.EDGE_COMPUTE, "enter")

    def _zero(self, task: Task, stage: Stage) -> None:
        if stage == Stage.LOCAL_COMPUTE:
            task.remaining_local_ms = 0.0
        elif stage == Stage.UPLINK:
            task.uplink_bytes_remaining = 0.0
        elif stage in (Stage.EDGE_QUEUE, Stage.EDGE_COMPUTE):
            task.remaining_edge_ms_at_unit_capacity = 0.0
        elif stage == Stage.BROADCAST:
            task.broadcast_bytes_remaining = 0.0

    def _exit(self, task: Task) -> None:
        name = STAGE_NAMES[task.stage]
        task.stage_ms[name] = task.stage_ms.get(name, 0) + self.now - task.entered_at
        if self.log is not None:
            self.log.add(self.now, task, task.stage, "exit")

    def _finish_stage(self, task: Task, completed: list) -> None:
        stage = task.stage
        self._zero(task, stage)
        self._exit(task)
        if stage == Stage.EDGE_COMPUTE:
            q = self.server.queues[task.queue_index]
            q.popleft()
            if q:
                nxt = q[0]
                self._exit(nxt)
                self._enter_head(nxt)
            self._enter(task, Stage.BROADCAST)
        else:
            self._enter(task, Stage(stage + 1))
        if task.stage == Stage.DONE:
            del self.tasks[task.vehicle_id]
            completed.append(task)

    # --- time --------------------------------------------------------------

    def _rates(self):
        floor = self.cfg.min_fraction
        ch = self.channel.cfg
        ul = [t.task_id for t in self.tasks.values() if t.stage == Stage.UPLINK]
        bc = [t.task_id for t in self.tasks.values() if t.stage == Stage.BROADCAST]
        ul_alloc = bandwidth_shares(ul, max(self.reservation[0], floor),
                                    ch.max_bandwidth_uplink_hz)
        bc_alloc = bandwidth_shares(bc, max(self.reservation[1], floor),
                                    ch.max_bandwidth_downlink_hz)
        if self.on_allocation is not None:
            self.on_allocation(self, ul_alloc, bc_alloc)
        ul_share = next(iter(ul_alloc.values()), 0.0)
        bc_share = next(iter(bc_alloc.values()), 0.0)
        return ul_share, bc_share, self.server.speedup(floor)

    def _ticks_to_finish(self, task: Task, ul_share: float, bc_share: float,
                         speed: float) -> int:
        t = self.now
        st = task.stage
        if st == Stage.LOCAL_COMPUTE:
            return max(1, math.ceil(task.remaining_local_ms - EPS_MS))
        if st == Stage.EDGE_COMPUTE:
            return max(1, math.ceil(task.remaining_edge_ms_at_unit_capacity / speed - EPS_MS))
        if st == Stage.UPLINK:
            return self._radio_ticks(task.vehicle_id, task.uplink_bytes_remaining, ul_share)
        if st == Stage.BROADCAST:
            return self._radio_ticks(None, task.broadcast_bytes_remaining, bc_share)
        raise AssertionError(f"no counter for {st.name} at tick {t}")

    def _radio_ticks(self, v: int | None, remaining_bytes: float, share_hz: float) -> int:
        # smallest n with share * (C[t+n] - C[t]) * tick >= remaining bits
        need = 8.0 * (remaining_bytes - EPS_BYTES) / (share_hz * TICK_S)
        horizon = 1024
        while True:
            self.channel.ensure(self.now + horizon)
            row = self._row(v)
            t = self.now - self.channel.base
            target = row[t] + need
            i = int(np.searchsorted(row, target, side="left"))
            if i < row.size:
                return max(1, i - t)
            horizon *= 4

    def _row(self, v: int | None) -> np.ndarray:
        return self.channel.cum_bc if v is None else self.channel.cum_se[v]

    def _transfer(self, v: int | None, share_hz: float, k: int) -> float:
        row = self._row(v)
        t = self.now - self.channel.base
        return share_hz * (row[t + k] - row[t]) * TICK_S / 8.0

    def advance(self, max_ticks: int) -> list[Task]:
        """Advance up to ``max_ticks`` ticks, stopping at the first stage change.

        Returns the tasks that completed (reached Done) at the new ``now``.
        """
        if max_ticks < 1:
            raise ValueError("max_ticks must be >= 1")
        active = [t for t in self.tasks.values() if t.stage != Stage.EDGE_QUEUE]
        if not active:
            self.now += max_ticks
            return []
        ul_share, bc_share, speed = self._rates()
        finish = {t.task_id: self._ticks_to_finish(t, ul_share, bc_share, speed)
                  for t in active}
        k = min(max_ticks, min(finish.values()))
        self.channel.ensure(self.now + k + 1)
        self.channel.trim(self.now - 1)
        for task in active:
            st = task.stage
            if st == Stage.LOCAL_COMPUTE:
                task.remaining_local_ms = max(0.0, task.remaining_local_ms - k)
            elif st == Stage.EDGE_COMPUTE:
                task.remaining_edge_ms_at_unit_capacity = max(
                    0.0, task.remaining_edge_ms_at_unit_capacity - k * speed)
            elif st == Stage.UPLINK:
                sent = self._transfer(task.vehicle_id, ul_share, k)
                task.uplink_bytes_remaining = max(0.0, task.uplink_bytes_remaining - sent)
            elif st == Stage.BROADCAST:
                sent = self._transfer(None, bc_share, k)
                task.broadcast_bytes_remaining = max(0.0, task.broadcast_bytes_remaining - sent)
        self.now += k
        done = sorted((t for t in active if finish[t.task_id] == k),
                      key=lambda t: (-int(t.stage), t.task_id))
        completed: list[Task] = []
        for task in done:
            self._finish_stage(task, completed)
        return completed

    def step(self) -> list[Task]:
        return self.advance(1)

    # --- observation helpers ----------------------------------------------

    def in_flight(self, vehicle_id: int) -> bool:
        return vehicle_id in self.tasks

    def server_workload_ms(self) -> float:
        return self.server.total_load()


def step(world: Simulator, tick_length: int = 1) -> list[Task]:
    """Advance exactly ``tick_length`` ticks one at a time; returns completions."""
    completed = []
    for _ in range(tick_length):
        completed.extend(world.step())
    return completed


def start_offload(world: Simulator, vehicle_id: int, split_ratio: float,
                  demands: TaskDemands, now: int | None = None) -> Task:
    return world.start_offload(vehicle_id, split_ratio, demands, now)
