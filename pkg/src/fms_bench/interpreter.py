"""Turns world state into agent activations, observations, and decision payloads.

One activation = one agent asked for one decision.  The scan order is fixed:
pending protocol steps first (chains run one item at a time), then feasible
dispatch bindings, then backlog release.  Candidate lists are deterministic:
backlog items in earliest-due order, everything else ascending by id, so the
action mask is always a dense [0..n-1] over a reproducible option order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine import PendingStep, WorldState, current_rate, feasible_dispatches, selectable_backlog
from .paradigms import AuthorityMode

DECISION_KINDS = (
    "backlog_selection",
    "area_selection",
    "cell_selection",
    "cell_commitment",
    "bid_submission",
    "local_dispatch",
    "reroute",
    "escalation_handling",
)

_LOOP_BY_KIND = {
    "backlog_selection": "release",
    "area_selection": "routing",
    "cell_selection": "routing",
    "bid_submission": "routing",
    "cell_commitment": "commitment",
    "local_dispatch": "dispatch",
    "reroute": "recovery",
    "escalation_handling": "recovery",
}

_SHARED_FACTORS = (
    "Minimize tardiness and makespan while keeping energy and carbon under their caps.",
    "Prefer balanced cell load and avoid avoidable cross-area transports.",
)

_KIND_FACTORS = {
    "backlog_selection": "Pick which backlog item to release next.",
    "area_selection": "Pick the area that should host the selected stage.",
    "cell_selection": "Pick the cell that should process the selected stage.",
    "cell_commitment": "Accept the proposed contract unless this cell cannot host it.",
    "bid_submission": "Bid only if this cell can take the stage without heavy congestion.",
    "local_dispatch": "Bind one ready job to one idle machine in this cell.",
    "reroute": "Pick a sibling cell able to absorb the rejected stage.",
    "escalation_handling": "Pick any eligible cell to rescue the escalated stage.",
}


@dataclass
class Activation:
    agent_id: str
    role: str
    kind: str
    cause: str
    loop: str
    job_id: int | None
    stage_index: int | None
    candidates: list
    step: PendingStep | None = None
    bid_cell: int | None = None


def interpret(world: WorldState, mode: AuthorityMode, realized: list[dict]) -> list[Activation]:
    """Return the activations pending at the current stopping point."""
    cause = "world_event" if realized else "protocol_object"
    if world.pending_steps:
        return _step_activations(world, mode, world.pending_steps[0], cause)
    dispatches = feasible_dispatches(world)
    if dispatches:
        acts = []
        for cell_id in sorted(dispatches):
            pairs = dispatches[cell_id]
            job_id = pairs[0][0]
            acts.append(
                Activation(
                    agent_id=f"cell{cell_id}",
                    role="cell",
                    kind="local_dispatch",
                    cause=cause,
                    loop="dispatch",
                    job_id=job_id,
                    stage_index=world.jobs[job_id].stage,
                    candidates=pairs,
                )
            )
        return acts
    backlog = selectable_backlog(world)
    if backlog:
        exposed = backlog[: world.config.scenario.backlog_top_k]
        return [
            Activation(
                agent_id="plant",
                role="plant",
                kind="backlog_selection",
                cause=cause,
                loop="release",
                job_id=None,
                stage_index=None,
                candidates=exposed,
            )
        ]
    return []


def _step_activations(world: WorldState, mode: AuthorityMode, step: PendingStep, cause: str) -> list[Activation]:
    job = world.jobs[step.job_id]
    stage = job.current_stage()
    h = world.config.hierarchy
    if step.kind == "area_selection":
        areas = sorted({h.area_of(c) for c in stage.eligible_cells})
        return [_one("plant", "plant", "area_selection", cause, job, areas, step)]
    if step.kind == "cell_selection":
        if step.data.get("scope") == "area":
            area = step.data["area"]
            cells = sorted(c for c in stage.eligible_cells if h.area_of(c) == area)
            return [_one(f"area{area}", "area", "cell_selection", cause, job, cells, step)]
        return [_one("plant", "plant", "cell_selection", cause, job, sorted(stage.eligible_cells), step)]
    if step.kind == "commitment":
        contract = world.contracts[step.data["contract_id"]]
        labels = ["accept"] if mode.cell_contract_actions == "accept_only" else ["accept", "reject"]
        return [_one(f"cell{contract.cell_id}", "cell", "cell_commitment", cause, job, labels, step)]
    if step.kind == "bid_round":
        remaining = [c for c in step.data["candidates"] if c not in step.data["responses"]]
        return [
            Activation(
                agent_id=f"cell{c}",
                role="cell",
                kind="bid_submission",
                cause=cause,
                loop="routing",
                job_id=job.job_id,
                stage_index=job.stage,
                candidates=["bid", "decline"],
                step=step,
                bid_cell=c,
            )
            for c in remaining
        ]
    if step.kind == "reroute":
        return [_one(f"area{step.data['area']}", "area", "reroute", cause, job, list(step.data["candidates"]), step)]
    if step.kind == "escalation":
        return [_one("plant", "plant", "escalation_handling", cause, job, list(step.data["candidates"]), step)]
    raise ValueError(f"unknown pending step kind {step.kind!r}")


def _one(agent_id: str, role: str, kind: str, cause: str, job, candidates: list, step: PendingStep) -> Activation:
    return Activation(
        agent_id=agent_id,
        role=role,
        kind=kind,
        cause=cause,
        loop=_LOOP_BY_KIND[kind],
        job_id=job.job_id,
        stage_index=job.stage,
        candidates=candidates,
        step=step,
    )


def legal_actions(activation: Activation) -> list[int]:
    return list(range(len(activation.candidates)))


# ---------------------------------------------------------------------------
# observations


def build_observation(world: WorldState, activation: Activation) -> dict:
    if activation.role == "plant":
        return _plant_observation(world)
    if activation.role == "area":
        area = int(activation.agent_id.removeprefix("area"))
        return _area_observation(world, area)
    cell = int(activation.agent_id.removeprefix("cell"))
    return _cell_observation(world, cell)


def _machine_counts(world: WorldState, cell_id: int) -> dict[str, int]:
    idle = busy = down = 0
    for m in world.machines.values():
        if m.cell_id != cell_id:
            continue
        if m.status == "idle":
            idle += 1
        elif m.status == "down":
            down += 1
        else:
            busy += 1
    return {"idle": idle, "busy": busy, "down": down}


def _plant_observation(world: WorldState) -> dict:
    h = world.config.hierarchy
    areas = []
    for area in h.areas:
        idle = busy = down = inbound = 0
        for cell in h.cells_in(area):
            counts = _machine_counts(world, cell)
            idle += counts["idle"]
            busy += counts["busy"]
            down += counts["down"]
            inbound += world.cells[cell].occupancy
        areas.append(
            {"area_id": area, "cells": len(h.cells_in(area)), "idle_machines": idle,
             "busy_machines": busy, "down_machines": down, "inbound_jobs": inbound}
        )
    return {
        "areas": areas,
        "backlog_jobs": len(world.backlog),
        "wip": world.wip(),
        "completed_jobs": world.accounting.completed_jobs,
    }


def _area_observation(world: WorldState, area: int) -> dict:
    h = world.config.hierarchy
    cells = []
    for cell in h.cells_in(area):
        counts = _machine_counts(world, cell)
        cells.append(
            {
                "cell_id": cell,
                "inbound_jobs": world.cells[cell].occupancy,
                "idle_machines": counts["idle"],
                "down_machines": counts["down"],
                "speed_modifier": world.config.scenario.speed_modifiers.get(cell, 1.0),
            }
        )
    return {"area_id": area, "cells": cells}


def _cell_observation(world: WorldState, cell_id: int) -> dict:
    cell = world.cells[cell_id]
    machines = []
    for mid in sorted(world.machines):
        m = world.machines[mid]
        if m.cell_id != cell_id:
            continue
        machines.append({"machine_id": mid, "status": m.status, "setup_family": m.setup_family})
    inbound = []
    for job_id in cell.inbound:
        job = world.jobs[job_id]
        inbound.append(
            {"job_id": job_id, "stage_index": job.stage, "status": job.status,
             "setup_family": job.current_stage().setup_family if job.status != "completed" else None}
        )
    return {"cell_id": cell_id, "machines": machines, "inbound": inbound, "reserved_slots": len(cell.reserved)}


# ---------------------------------------------------------------------------
# payloads


def _cell_option(world: WorldState, job, cell_id: int, action: int) -> dict:
    counts = _machine_counts(world, cell_id)
    stage = job.current_stage()
    families = {
        world.machines[m].setup_family
        for m in world.machines
        if world.machines[m].cell_id == cell_id
    }
    return {
        "action": action,
        "cell_id": cell_id,
        "summary": {
            "backlog_jobs": world.cells[cell_id].occupancy,
            "active_jobs": counts["busy"],
            "idle_machines": counts["idle"],
            "down_machines": counts["down"],
            "speed_modifier": world.config.scenario.speed_modifiers.get(cell_id, 1.0),
            "setup_match": stage.setup_family in families,
        },
    }


def _build_options(world: WorldState, activation: Activation) -> list[dict]:
    kind = activation.kind
    if kind == "backlog_selection":
        options = []
        for action, job_id in enumerate(activation.candidates):
            job = world.jobs[job_id]
            options.append(
                {
                    "action": action,
                    "job_id": job_id,
                    "stage_index": job.stage,
                    "due_date": job.spec.due_date,
                    "summary": {
                        "remaining_ops": job.stages_total - job.stage,
                        "eligible_cells": len(job.current_stage().eligible_cells),
                    },
                }
            )
        return options
    if kind == "area_selection":
        job = world.jobs[activation.job_id]
        stage = job.current_stage()
        h = world.config.hierarchy
        options = []
        for action, area in enumerate(activation.candidates):
            eligible = [c for c in stage.eligible_cells if h.area_of(c) == area]
            idle = sum(_machine_counts(world, c)["idle"] for c in eligible)
            busy = sum(_machine_counts(world, c)["busy"] for c in eligible)
            queued = sum(world.cells[c].occupancy for c in eligible)
            options.append(
                {
                    "action": action,
                    "area_id": area,
                    "summary": {
                        "backlog_jobs": queued,
                        "active_jobs": busy,
                        "idle_machines": idle,
                        "eligible_cells": len(eligible),
                    },
                }
            )
        return options
    if kind in ("cell_selection", "reroute", "escalation_handling"):
        job = world.jobs[activation.job_id]
        return [
            _cell_option(world, job, cell_id, action)
            for action, cell_id in enumerate(activation.candidates)
        ]
    if kind == "cell_commitment":
        contract = world.contracts[activation.step.data["contract_id"]]
        return [
            {"action": action, "decision": label, "cell_id": contract.cell_id}
            for action, label in enumerate(activation.candidates)
        ]
    if kind == "bid_submission":
        return [
            {"action": action, "decision": label, "cell_id": activation.bid_cell}
            for action, label in enumerate(activation.candidates)
        ]
    if kind == "local_dispatch":
        options = []
        for action, (job_id, machine_id) in enumerate(activation.candidates):
            job = world.jobs[job_id]
            machine = world.machines[machine_id]
            options.append(
                {
                    "action": action,
                    "job_id": job_id,
                    "machine_id": machine_id,
                    "summary": {
                        "setup_needed": machine.setup_family != job.current_stage().setup_family,
                        "due_date": job.spec.due_date,
                    },
                }
            )
        return options
    raise ValueError(f"unknown activation kind {kind!r}")


def build_payload(
    world: WorldState,
    activation: Activation,
    epoch: int,
    realized: list[dict],
    working_memory: list[str],
) -> dict:
    """The single JSON document a controller sees for one decision."""
    acc = world.accounting
    budgets = world.config.budgets
    job = world.jobs[activation.job_id] if activation.job_id is not None else None
    payload = {
        "agent": activation.agent_id,
        "role": activation.role,
        "kind": activation.kind,
        "epoch": epoch,
        "time": round(world.clock, 6),
        "job_id": activation.job_id,
        "stage_index": activation.stage_index,
        "decision_factors": [*_SHARED_FACTORS, _KIND_FACTORS[activation.kind]],
        "options": _build_options(world, activation),
        "legal_actions": legal_actions(activation),
        "observation": build_observation(world, activation),
        "context": {
            "progress": {
                "completed_jobs": acc.completed_jobs,
                "unfinished_jobs": world.unfinished(),
                "backlog_jobs": len(world.backlog),
                "wip": world.wip(),
            },
            "energy": {
                "total_kwh": round(acc.energy_kwh, 1),
                "rate_now": round(current_rate(world), 1),
                "rate_cap": budgets.energy_cap,
                "carbon_cap": budgets.carbon_cap,
            },
            "recent_event_types": sorted({e["kind"] for e in realized}),
            "selected_due_date": job.spec.due_date if job is not None else None,
            "working_memory": list(working_memory),
        },
    }
    return payload
