"""Discrete-event engine: world state, event queue, physical transitions, accounting.

The engine owns everything physical (transport, buffers, machines, failures,
energy) and is protocol-agnostic: coordination layers enqueue pending decision
steps and committed assignments, the engine turns them into timed events.
Events are totally ordered by (time, insertion sequence), so identical inputs
replay to identical traces.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from .instances import FailureProfile, InstanceConfig, JobSpec, generate_jobs

EVENT_KINDS = (
    "arrival",
    "setup_start",
    "setup_complete",
    "finish",
    "breakdown",
    "repair",
    "shared_backlog_arrival",
    "transport_start",
    "transport_complete",
    "stage_release_ready",
    "buffer_wait_start",
    "blocking_start",
    "buffer_admit",
    "blocking_end",
)

JOB_STATUSES = ("pending", "backlog", "in_transport", "inbound", "ready", "processing", "blocked", "completed")

#: queue kinds that can never move a job forward on their own
_BACKGROUND_KINDS = ("breakdown", "repair")

#: event kinds that mark forward progress for the no-progress window
_PROGRESS_KINDS = ("finish", "transport_complete")


class CorruptionError(Exception):
    """Internal inconsistency between an event and the world state."""


@dataclass
class JobState:
    job_id: int
    spec: JobSpec
    status: str = "pending"
    stage: int = 0
    in_flight: bool = False
    location: int | None = None
    assigned_cell: int | None = None
    contract_id: int | None = None
    transport_started: float | None = None
    completed_at: float | None = None

    @property
    def stages_total(self) -> int:
        return len(self.spec.route)

    def current_stage(self):
        return self.spec.route[self.stage]


@dataclass
class MachineState:
    machine_id: str
    cell_id: int
    status: str = "idle"  # idle | setup | processing | down
    setup_family: str | None = None
    current_job: int | None = None
    pending_setup: float = 0.0
    pending_proc: float = 0.0
    pending_family: str | None = None
    segment_end: float = 0.0
    resume: str | None = None
    token: int = 0
    busy_time: float = 0.0


@dataclass
class CellState:
    cell_id: int
    area_id: int
    cap: int
    inbound: list[int] = field(default_factory=list)
    reserved: set[int] = field(default_factory=set)

    @property
    def occupancy(self) -> int:
        return len(self.inbound) + len(self.reserved)


@dataclass
class PendingStep:
    """One queued coordination step awaiting a decision."""

    kind: str  # area_selection | cell_selection | commitment | bid_round | reroute | escalation
    job_id: int
    data: dict[str, Any] = field(default_factory=dict)


@dataclass
class AccountingState:
    processing_energy: float = 0.0
    setup_energy: float = 0.0
    transport_energy: float = 0.0
    setup_time: float = 0.0
    transport_time: float = 0.0
    transport_moves: int = 0
    blocking_time: float = 0.0
    buffer_wait_time: float = 0.0
    downtime: float = 0.0
    repair_time: float = 0.0
    breakdown_count: int = 0
    arrival_events: int = 0
    arrived_jobs: int = 0
    completed_jobs: int = 0
    completed_ops: int = 0
    cell_energy: dict[int, float] = field(default_factory=dict)
    rate_series: list[tuple[float, float]] = field(default_factory=lambda: [(0.0, 0.0)])
    last_accrual: float = 0.0

    @property
    def energy_kwh(self) -> float:
        return self.processing_energy + self.setup_energy + self.transport_energy


@dataclass
class WorldState:
    config: InstanceConfig
    seed: int
    clock: float = 0.0
    status: str = "running"  # running | done | deadlock | truncated
    deadlocked: bool = False
    truncated: bool = False
    jobs: dict[int, JobState] = field(default_factory=dict)
    machines: dict[str, MachineState] = field(default_factory=dict)
    cells: dict[int, CellState] = field(default_factory=dict)
    backlog: list[int] = field(default_factory=list)
    blocked_queue: list[int] = field(default_factory=list)
    parked: set[int] = field(default_factory=set)
    pending_steps: deque[PendingStep] = field(default_factory=deque)
    contracts: dict[int, Any] = field(default_factory=dict)
    queue: list[tuple[float, int, str, dict]] = field(default_factory=list)
    seq: int = 0
    job_event_count: int = 0
    epochs: int = 0
    last_progress_epoch: int = 0
    rng: random.Random = field(default_factory=random.Random)
    accounting: AccountingState = field(default_factory=AccountingState)
    event_trace: list[dict] = field(default_factory=list)
    protocol_records: list[dict] = field(default_factory=list)
    settlement_records: list[dict] = field(default_factory=list)
    notifications: list[dict] = field(default_factory=list)

    def wip(self) -> int:
        return sum(1 for j in self.jobs.values() if j.in_flight)

    def unfinished(self) -> int:
        return sum(1 for j in self.jobs.values() if j.status != "completed")


def _derive_rng(instance_id: str, seed: int, channel: str) -> random.Random:
    digest = hashlib.sha256(f"{instance_id}:{seed}:{channel}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def schedule(world: WorldState, time: float, kind: str, data: dict) -> None:
    if kind not in EVENT_KINDS:
        raise CorruptionError(f"unknown event kind {kind!r}")
    if time < world.clock:
        raise CorruptionError(f"event {kind} scheduled in the past ({time} < {world.clock})")
    heapq.heappush(world.queue, (time, world.seq, kind, data))
    world.seq += 1
    if kind not in _BACKGROUND_KINDS:
        world.job_event_count += 1


def init_world(config: InstanceConfig, seed: int) -> WorldState:
    """Build the t=0 world: jobs registered, arrivals and first breakdowns queued."""
    route_seed = config.grammar.seed if config.grammar is not None else seed
    specs = generate_jobs(config, route_seed)
    world = WorldState(config=config, seed=seed, rng=_derive_rng(config.instance_id, seed, "world"))
    for spec in specs:
        world.jobs[spec.job_id] = JobState(job_id=spec.job_id, spec=spec)
    h = config.hierarchy
    for cell in h.cells:
        world.cells[cell] = CellState(cell_id=cell, area_id=h.area_of(cell), cap=config.scenario.inbound_cap)
        for m in h.machines_in(cell):
            world.machines[m] = MachineState(machine_id=m, cell_id=cell)
    for cell in sorted(world.cells):
        world.accounting.cell_energy[cell] = 0.0

    initial = list(config.scenario.initial_backlog_job_ids)
    plan = list(config.scenario.arrival_plan)
    if not initial and not plan:
        initial = sorted(world.jobs)
    schedule(world, 0.0, "shared_backlog_arrival", {"job_ids": list(initial), "initial": True})
    for time, batch in plan:
        schedule(world, time, "shared_backlog_arrival", {"job_ids": list(batch), "initial": False})

    for mid in sorted(world.machines):
        offset = sample_failure(config.failure_profile, world.rng, age=0.0, load=0.0)
        if math.isfinite(offset):
            schedule(world, offset, "breakdown", {"machine_id": mid})
    return world


def sample_failure(profile: FailureProfile, rng: random.Random, age: float, load: float) -> float:
    """Sample the next time-to-failure offset; inf means no failure will occur."""
    params = profile.parameters
    if profile.kind == "exponential_nominal":
        rate = params.get("rate", 0.0)
        if rate <= 0:
            return math.inf
        return rng.expovariate(rate)
    if profile.kind == "weibull_aging":
        shape = params.get("shape", 1.0)
        scale = params.get("scale", 0.0)
        if scale <= 0 or shape <= 0:
            return math.inf
        u = 1.0 - rng.random()  # (0, 1], keeps the log finite
        aged = (age / scale) ** shape
        return scale * (aged - math.log(u)) ** (1.0 / shape) - age
    if profile.kind == "load_dependent":
        base = params.get("rate", 0.0)
        coeff = params.get("load_coefficient", 0.0)
        rate = base * (1.0 + coeff * max(0.0, load))
        if rate <= 0:
            return math.inf
        return rng.expovariate(rate)
    raise CorruptionError(f"unknown failure profile kind {profile.kind!r}")


def sample_repair(profile: FailureProfile, rng: random.Random) -> float:
    return rng.uniform(profile.repair_low, profile.repair_high)


def hop_count(config: InstanceConfig, origin: int | None, dest: int) -> int:
    if origin is None:
        return 1
    if origin == dest:
        return 0
    h = config.hierarchy
    return 1 if h.area_of(origin) == h.area_of(dest) else 2


def transport_duration(config: InstanceConfig, origin: int | None, dest: int) -> float:
    return hop_count(config, origin, dest) * 1.0 * config.scenario.transport_multiplier


# ---------------------------------------------------------------------------
# accounting


def _activity_counts(world: WorldState) -> tuple[int, int, int, int, int]:
    n_proc = n_setup = n_down = 0
    for m in world.machines.values():
        if m.status == "processing":
            n_proc += 1
        elif m.status == "setup":
            n_setup += 1
        elif m.status == "down":
            n_down += 1
    n_trans = sum(1 for j in world.jobs.values() if j.status == "in_transport")
    n_block = sum(1 for j in world.jobs.values() if j.status == "blocked")
    return n_proc, n_setup, n_trans, n_block, n_down


def current_rate(world: WorldState) -> float:
    em = world.config.energy_model
    n_proc, n_setup, n_trans, _, _ = _activity_counts(world)
    return em.processing_power * n_proc + em.setup_power * n_setup + em.transport_power * n_trans


def accrue(world: WorldState, to_time: float) -> None:
    """Integrate activity between the last accrual point and to_time."""
    acc = world.accounting
    dt = to_time - acc.last_accrual
    if dt < 0:
        raise CorruptionError("accrual going backwards")
    if dt == 0:
        return
    em = world.config.energy_model
    n_proc, n_setup, n_trans, n_block, n_down = _activity_counts(world)
    acc.setup_time += n_setup * dt
    acc.transport_time += n_trans * dt
    acc.blocking_time += n_block * dt
    acc.downtime += n_down * dt
    # repair starts the moment a machine fails, so repair time is the same
    # down-state integral; kept separate in the catalog
    acc.repair_time += n_down * dt
    acc.setup_energy += em.setup_power * n_setup * dt
    acc.transport_energy += em.transport_power * n_trans * dt
    acc.processing_energy += em.processing_power * n_proc * dt
    for m in world.machines.values():
        if m.status in ("setup", "processing"):
            m.busy_time += dt
            power = em.processing_power if m.status == "processing" else em.setup_power
            acc.cell_energy[m.cell_id] += power * dt
    for j in world.jobs.values():
        if j.status == "in_transport" and j.assigned_cell is not None:
            acc.cell_energy[j.assigned_cell] += em.transport_power * dt
    acc.last_accrual = to_time


def _record_rate(world: WorldState) -> None:
    rate = current_rate(world)
    series = world.accounting.rate_series
    last_time, last_rate = series[-1]
    if rate == last_rate:
        return
    if last_time == world.clock:
        # zero-width segment: fold same-instant changes into one step
        series[-1] = (world.clock, rate)
        if len(series) > 1 and series[-2][1] == rate:
            series.pop()
    else:
        series.append((world.clock, rate))


# ---------------------------------------------------------------------------
# decision-relevant structure


def feasible_dispatches(world: WorldState) -> dict[int, list[tuple[int, str]]]:
    """Per cell, the sorted (job, machine) bindings that could start right now."""
    out: dict[int, list[tuple[int, str]]] = {}
    for cell_id in sorted(world.cells):
        cell = world.cells[cell_id]
        ready = [j for j in cell.inbound if world.jobs[j].status == "ready"]
        if not ready:
            continue
        idle = [m for m in sorted(world.machines) if world.machines[m].cell_id == cell_id and world.machines[m].status == "idle"]
        if not idle:
            continue
        out[cell_id] = [(j, m) for j in sorted(ready) for m in idle]
    return out


def selectable_backlog(world: WorldState) -> list[int]:
    """Backlog jobs currently exposable for release, earliest due date first."""
    if world.pending_steps:
        return []
    if world.wip() >= world.config.budgets.wip_cap:
        return []
    candidates = [j for j in world.backlog if j not in world.parked]
    candidates.sort(key=lambda j: (world.jobs[j].spec.due_date, j))
    return candidates


def has_pending_decision(world: WorldState) -> bool:
    if world.pending_steps:
        return True
    if feasible_dispatches(world):
        return True
    return bool(selectable_backlog(world))


def _progress_reachable(world: WorldState) -> bool:
    if world.job_event_count > 0:
        return True
    for m in world.machines.values():
        if m.status in ("setup", "processing"):
            return True
    for m in world.machines.values():
        if m.status == "down" and (m.resume is not None or world.cells[m.cell_id].inbound):
            return True
    return False


# ---------------------------------------------------------------------------
# the event loop


def advance(world: WorldState) -> list[dict]:
    """Run the queue forward to the next decision-relevant stopping point.

    Returns the realized events in application order.  Sets the terminal
    status when the episode finishes or can no longer make progress.
    """
    realized: list[dict] = []
    while world.status == "running":
        if has_pending_decision(world):
            break
        if not world.queue or not _progress_reachable(world):
            world.status = "deadlock"
            world.deadlocked = True
            break
        time, seq, kind, data = heapq.heappop(world.queue)
        if kind not in _BACKGROUND_KINDS:
            world.job_event_count -= 1
        accrue(world, time)
        world.clock = time
        record = {"time": time, "seq": seq, "kind": kind, **data}
        apply_event(world, kind, data)
        _record_rate(world)
        realized.append(record)
        world.event_trace.append(record)
    return realized


def apply_event(world: WorldState, kind: str, data: dict) -> None:
    """Apply one realized event's physical transition at world.clock."""
    now = world.clock
    acc = world.accounting
    if kind == "shared_backlog_arrival":
        initial = bool(data.get("initial"))
        if not initial:
            acc.arrival_events += 1
        for job_id in data["job_ids"]:
            schedule(world, now, "arrival", {"job_id": job_id, "initial": initial})
    elif kind == "arrival":
        job = world.jobs[data["job_id"]]
        if job.status != "pending":
            raise CorruptionError(f"job {job.job_id} arrived twice")
        job.status = "backlog"
        world.backlog.append(job.job_id)
        if not data.get("initial"):
            acc.arrived_jobs += 1
    elif kind == "stage_release_ready":
        job = world.jobs[data["job_id"]]
        if job.assigned_cell is None:
            raise CorruptionError(f"job {job.job_id} released without an assignment")
        cell = world.cells[job.assigned_cell]
        if cell.occupancy < cell.cap:
            cell.reserved.add(job.job_id)
            schedule(world, now, "transport_start", {"job_id": job.job_id})
        else:
            schedule(world, now, "blocking_start", {"job_id": job.job_id, "cell_id": cell.cell_id})
    elif kind == "blocking_start":
        job = world.jobs[data["job_id"]]
        job.status = "blocked"
        world.blocked_queue.append(job.job_id)
    elif kind == "buffer_admit":
        job = world.jobs[data["job_id"]]
        cell = world.cells[data["cell_id"]]
        cell.reserved.add(job.job_id)
        schedule(world, now, "blocking_end", {"job_id": job.job_id})
    elif kind == "blocking_end":
        schedule(world, now, "transport_start", {"job_id": data["job_id"]})
    elif kind == "buffer_wait_start":
        pass  # marker only: arrival had to wait for admission
    elif kind == "transport_start":
        job = world.jobs[data["job_id"]]
        assert job.assigned_cell is not None
        dur = transport_duration(world.config, job.location, job.assigned_cell)
        job.status = "in_transport"
        job.transport_started = now
        acc.transport_moves += 1
        schedule(world, now + dur, "transport_complete", {"job_id": job.job_id})
    elif kind == "transport_complete":
        job = world.jobs[data["job_id"]]
        cell = world.cells[job.assigned_cell]
        if job.job_id not in cell.reserved:
            raise CorruptionError(f"job {job.job_id} arrived without a reservation")
        cell.reserved.discard(job.job_id)
        cell.inbound.append(job.job_id)
        job.location = cell.cell_id
        job.status = "ready"
        _mark_progress(world)
    elif kind == "setup_start":
        pass  # marker only: the dispatch already claimed the machine
    elif kind == "setup_complete":
        m = world.machines[data["machine_id"]]
        if data["token"] != m.token:
            return
        m.pending_setup = 0.0
        m.setup_family = m.pending_family
        m.status = "processing"
        m.segment_end = now + m.pending_proc
        schedule(world, m.segment_end, "finish", {"machine_id": m.machine_id, "job_id": m.current_job, "token": m.token})
    elif kind == "finish":
        m = world.machines[data["machine_id"]]
        if data["token"] != m.token:
            return
        _finish_stage(world, m)
    elif kind == "breakdown":
        m = world.machines[data["machine_id"]]
        if m.status == "down":
            raise CorruptionError(f"machine {m.machine_id} broke while down")
        acc.breakdown_count += 1
        repair_dur = sample_repair(world.config.failure_profile, world.rng)
        if m.status in ("setup", "processing"):
            remaining = m.segment_end - now
            if m.status == "setup":
                m.pending_setup = remaining
                m.resume = "setup"
            else:
                m.pending_proc = remaining
                m.resume = "processing"
            m.token += 1
        else:
            m.resume = None
        m.status = "down"
        schedule(world, now + repair_dur, "repair", {"machine_id": m.machine_id})
    elif kind == "repair":
        m = world.machines[data["machine_id"]]
        if m.resume == "setup":
            m.status = "setup"
            m.segment_end = now + m.pending_setup
            schedule(world, m.segment_end, "setup_complete", {"machine_id": m.machine_id, "token": m.token})
        elif m.resume == "processing":
            m.status = "processing"
            m.segment_end = now + m.pending_proc
            schedule(world, m.segment_end, "finish", {"machine_id": m.machine_id, "job_id": m.current_job, "token": m.token})
        else:
            m.status = "idle"
        m.resume = None
        load = m.busy_time / now if now > 0 else 0.0
        offset = sample_failure(world.config.failure_profile, world.rng, age=now, load=load)
        if math.isfinite(offset):
            schedule(world, now + offset, "breakdown", {"machine_id": m.machine_id})
    else:
        raise CorruptionError(f"unknown event kind {kind!r}")


def _mark_progress(world: WorldState) -> None:
    world.last_progress_epoch = world.epochs
    if world.parked:
        world.parked.clear()


def _finish_stage(world: WorldState, m: MachineState) -> None:
    now = world.clock
    job = world.jobs[m.current_job]
    stage_done = job.stage
    m.status = "idle"
    m.current_job = None
    m.pending_proc = 0.0
    world.accounting.completed_ops += 1
    final = stage_done == job.stages_total - 1
    world.notifications.append(
        {"kind": "stage_completed", "job_id": job.job_id, "stage_index": stage_done, "time": now, "final": final}
    )
    job.in_flight = False
    job.assigned_cell = None
    if final:
        job.status = "completed"
        job.completed_at = now
        world.accounting.completed_jobs += 1
        if all(j.status == "completed" for j in world.jobs.values()):
            world.status = "done"
    else:
        job.stage += 1
        job.status = "backlog"
        world.backlog.append(job.job_id)
    _mark_progress(world)
    _release_capacity(world, m.cell_id)


def _release_capacity(world: WorldState, cell_id: int) -> None:
    """Admit blocked releases into freed buffer slots, oldest blocking first."""
    cell = world.cells[cell_id]
    while cell.occupancy < cell.cap:
        next_job = None
        for job_id in world.blocked_queue:
            job = world.jobs[job_id]
            if job.assigned_cell == cell_id and job.status == "blocked":
                next_job = job_id
                break
        if next_job is None:
            break
        world.blocked_queue.remove(next_job)
        # Reserve immediately so a same-instant competitor cannot double-book.
        cell.reserved.add(next_job)
        schedule(world, world.clock, "buffer_admit", {"job_id": next_job, "cell_id": cell_id})


# ---------------------------------------------------------------------------
# committed assignments (called by the coordination layer)


def start_dispatch(world: WorldState, job_id: int, machine_id: str) -> None:
    """Bind a ready job to an idle machine; schedules setup/processing."""
    job = world.jobs[job_id]
    m = world.machines[machine_id]
    if job.status != "ready" or m.status != "idle" or m.cell_id != job.location:
        raise CorruptionError(f"dispatch of job {job_id} on {machine_id} is not feasible")
    cell = world.cells[m.cell_id]
    cell.inbound.remove(job_id)
    stage = job.current_stage()
    modifier = world.config.scenario.speed_modifiers.get(m.cell_id, 1.0)
    m.current_job = job_id
    m.pending_proc = stage.base_processing_time * modifier
    m.pending_family = stage.setup_family
    job.status = "processing"
    if m.setup_family != stage.setup_family:
        # Claim the machine in the same instant the decision commits, or a
        # same-clock re-scan would offer it to the next inbound job.
        m.pending_setup = world.config.energy_model.setup_duration
        m.status = "setup"
        m.segment_end = world.clock + m.pending_setup
        schedule(world, world.clock, "setup_start", {"machine_id": machine_id, "job_id": job_id})
        schedule(world, m.segment_end, "setup_complete", {"machine_id": machine_id, "token": m.token})
    else:
        m.pending_setup = 0.0
        m.status = "processing"
        m.segment_end = world.clock + m.pending_proc
        schedule(world, m.segment_end, "finish", {"machine_id": machine_id, "job_id": job_id, "token": m.token})
    _release_capacity(world, m.cell_id)
    _record_rate(world)


def schedule_stage_release(world: WorldState, job_id: int, cell_id: int) -> None:
    """Queue the physical release of a committed stage toward its cell."""
    job = world.jobs[job_id]
    job.assigned_cell = cell_id
    schedule(world, world.clock, "stage_release_ready", {"job_id": job_id})


def check_termination(world: WorldState) -> None:
    """Apply horizon and no-progress truncation after a decision epoch."""
    if world.status != "running":
        return
    limits = world.config.limits
    if world.epochs >= limits.horizon_limit:
        world.status = "truncated"
        world.truncated = True
    elif world.epochs - world.last_progress_epoch >= limits.no_progress_window:
        world.status = "truncated"
        world.truncated = True


def finalize(world: WorldState) -> None:
    accrue(world, world.clock)


def job_table(world: WorldState) -> list[dict]:
    out = []
    for job_id in sorted(world.jobs):
        j = world.jobs[job_id]
        out.append(
            {
                "job_id": job_id,
                "due_date": j.spec.due_date,
                "release_time": j.spec.release_time,
                "stages_total": j.stages_total,
                "stages_done": j.stage + (1 if j.status == "completed" else 0),
                "completed_at": j.completed_at,
                "status": j.status,
            }
        )
    return out


def world_fingerprint(world: WorldState) -> dict:
    """Deterministic digest of the dynamic state, for replay comparisons."""
    return {
        "clock": world.clock,
        "status": world.status,
        "jobs": {
            j.job_id: (j.status, j.stage, j.location, j.assigned_cell) for j in world.jobs.values()
        },
        "machines": {
            m.machine_id: (m.status, m.setup_family, m.current_job, round(m.segment_end, 12))
            for m in world.machines.values()
        },
        "cells": {c.cell_id: (list(c.inbound), sorted(c.reserved)) for c in world.cells.values()},
        "backlog": list(world.backlog),
        "queue_len": len(world.queue),
        "energy": world.accounting.energy_kwh,
    }
