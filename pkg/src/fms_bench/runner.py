"""Episode loop and suite orchestration.

A case is one (instance, authority mode, controller, seed) episode.  Each case
persists four trace files; the per-case metric rows, the seed-aggregated suite
rows, and the artifact manifest are derived from those files alone, so a
finished output directory can always be re-audited offline.  Suite runs are
restartable: cases whose trace files are already on disk are loaded back
instead of re-executed.
"""

from __future__ import annotations

import csv
import json
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

from . import engine, interpreter, paradigms
from .controllers import ControllerBinding, DecisionAudit, decide, open_session
from .instances import InstanceConfig, load_instance
from .metrics import (
    CSV_COLUMNS,
    SUITE_COLUMNS,
    EpisodeTrace,
    MetricRecord,
    aggregate_suite,
    compute_episode_metrics,
)

TRACE_FILES = (
    "world_event_trace.json",
    "activation_trace.json",
    "protocol_trace.json",
    "settlement_trace.json",
)

#: suite aliases accepted by the CLI next to plain instance and source ids
SUITE_ALIASES = {
    "intercell_a3c9_wide": ("a3c9_1",),
    "intercell_a5c12_harder": ("a5c12_1",),
    "a5c12_all": ("a5c12_1", "a5c12_2", "a5c12_3"),
    "all": ("a3c9_1", "a5c12_1", "a5c12_2", "a5c12_3"),
    "full": ("a3c9_1", "a5c12_1", "a5c12_2", "a5c12_3"),
}

_SOURCE_IDS = {
    "intercell_a3c9_cross_area_tradeoff": "a3c9_1",
    "intercell_a5c12_branch_pressure": "a5c12_1",
    "intercell_a5c12_cluster_pull": "a5c12_2",
    "intercell_a5c12_late_commit": "a5c12_3",
}


def resolve_suite(name: str) -> list[str]:
    """Map a suite alias, source id, or instance ref to instance refs."""
    out: list[str] = []
    for part in name.split(","):
        part = part.strip()
        if not part:
            continue
        if part in SUITE_ALIASES:
            out.extend(SUITE_ALIASES[part])
        elif part in _SOURCE_IDS:
            out.append(_SOURCE_IDS[part])
        else:
            out.append(part)
    if not out:
        raise ValueError(f"suite {name!r} names no instances")
    return out


def make_case_id(instance_id: str, mode_id: str, controller: str, seed: int) -> str:
    return f"{instance_id}__{mode_id}__{controller}__seed{seed}"


def parse_case_id(case_id: str) -> tuple[str, str, str, int]:
    parts = case_id.split("__")
    if len(parts) != 4 or not parts[3].startswith("seed"):
        raise ValueError(f"malformed case id {case_id!r}")
    return parts[0], parts[1], parts[2], int(parts[3][4:])


@dataclass
class EpisodeResult:
    trace: EpisodeTrace
    record: MetricRecord
    wall_seconds: float


@dataclass(frozen=True)
class RunRequest:
    instances: tuple[str, ...]
    mode_ids: tuple[str, ...]
    binding: ControllerBinding
    seeds: tuple[int, ...]
    output_dir: str
    framework: str = "none"
    jobs: int = 1


# ---------------------------------------------------------------------------
# one episode


def _outcome_label(act: interpreter.Activation, action: int) -> str:
    chosen = act.candidates[action]
    if act.kind in ("cell_commitment", "bid_submission"):
        return str(chosen)
    if act.kind == "local_dispatch":
        job_id, machine_id = chosen
        return f"job{job_id}->{machine_id}"
    if act.kind == "backlog_selection":
        return f"job{chosen}"
    if act.kind == "area_selection":
        return f"area{chosen}"
    return f"cell{chosen}"


def run_episode(
    config: InstanceConfig,
    mode_id: str,
    binding: ControllerBinding,
    seed: int,
    framework: str = "none",
) -> EpisodeResult:
    mode = paradigms.get_authority_mode(mode_id)
    world = engine.init_world(config, seed)
    runtime = paradigms.ProtocolRuntime(mode, world)
    session = open_session(binding, seed)
    audit = DecisionAudit()
    activation_records: list[dict] = []
    memory: deque[str] = deque(maxlen=3)
    realized: list[dict] = []
    start = time.perf_counter()
    try:
        while world.status == "running":
            acts = interpreter.interpret(world, mode, realized)
            if not acts:
                realized = engine.advance(world)
                _drain_notifications(world, runtime)
                continue
            _commit_epoch(world, runtime, binding, session, audit, acts, realized, activation_records, memory)
            realized = []
            world.epochs += 1
            engine.check_termination(world)
    finally:
        session.close()
    engine.finalize(world)
    _drain_notifications(world, runtime)
    wall = time.perf_counter() - start
    audit.fallback_contracts = runtime.fallback_contracts
    trace = _build_trace(config, mode_id, binding, seed, framework, world, activation_records, audit, wall)
    return EpisodeResult(trace=trace, record=compute_episode_metrics(trace), wall_seconds=wall)


def _commit_epoch(
    world: engine.WorldState,
    runtime: paradigms.ProtocolRuntime,
    binding: ControllerBinding,
    session,
    audit: DecisionAudit,
    acts: list[interpreter.Activation],
    realized: list[dict],
    records: list[dict],
    memory: deque[str],
) -> None:
    bid_step = None
    bid_responses: dict[int, int] = {}
    for act in acts:
        mask = interpreter.legal_actions(act)
        if not mask:
            audit.no_action += 1
            records.append(_activation_record(world, act, 0, None, "none", False))
            continue
        payload = interpreter.build_payload(world, act, world.epochs, realized, list(memory))
        action, source, first_pass = decide(session, payload, audit, retries=binding.retries)
        records.append(_activation_record(world, act, len(mask), action, source, first_pass))
        memory.append(f"epoch {world.epochs}: {act.agent_id} {act.kind} -> {_outcome_label(act, action)}")
        if act.kind == "bid_submission":
            bid_step = act.step
            bid_responses[act.bid_cell] = action
            continue
        runtime.handle_decision(act.kind, act.job_id, action, act.candidates, act.step)
    if bid_step is not None:
        runtime.handle_bid_batch(bid_step.job_id, bid_step, bid_responses)


def _activation_record(
    world: engine.WorldState,
    act: interpreter.Activation,
    legal_count: int,
    action: int | None,
    source: str,
    first_pass: bool,
) -> dict:
    return {
        "epoch": world.epochs,
        "time": world.clock,
        "agent": act.agent_id,
        "role": act.role,
        "kind": act.kind,
        "cause": act.cause,
        "loop": act.loop,
        "job_id": act.job_id,
        "stage_index": act.stage_index,
        "legal_count": legal_count,
        "action": action,
        "source": source,
        "first_pass": first_pass,
    }


def _drain_notifications(world: engine.WorldState, runtime: paradigms.ProtocolRuntime) -> None:
    notes = world.notifications
    world.notifications = []
    for note in notes:
        if note["kind"] == "stage_completed":
            runtime.settle_stage(note)


def _build_trace(
    config: InstanceConfig,
    mode_id: str,
    binding: ControllerBinding,
    seed: int,
    framework: str,
    world: engine.WorldState,
    activation_records: list[dict],
    audit: DecisionAudit,
    wall: float,
) -> EpisodeTrace:
    acc = world.accounting
    contracts = [
        {
            "contract_id": c.contract_id,
            "job_id": c.job_id,
            "stage_index": c.stage_index,
            "cell_id": c.cell_id,
            "state": c.state,
            "provenance": c.provenance,
            "created_at": c.created_at,
            "committed_at": c.committed_at,
            "settled_at": c.settled_at,
        }
        for _, c in sorted(world.contracts.items())
    ]
    accounting = {
        "processing_energy": acc.processing_energy,
        "setup_energy": acc.setup_energy,
        "transport_energy": acc.transport_energy,
        "setup_time": acc.setup_time,
        "transport_time": acc.transport_time,
        "transport_moves": acc.transport_moves,
        "blocking_time": acc.blocking_time,
        "buffer_wait_time": acc.buffer_wait_time,
        "downtime": acc.downtime,
        "repair_time": acc.repair_time,
        "breakdown_count": acc.breakdown_count,
        "arrival_events": acc.arrival_events,
        "arrived_jobs": acc.arrived_jobs,
        "completed_jobs": acc.completed_jobs,
        "completed_ops": acc.completed_ops,
        "cell_energy": {str(cell): value for cell, value in sorted(acc.cell_energy.items())},
        "rate_series": [[t, r] for t, r in acc.rate_series],
    }
    return EpisodeTrace(
        case_id=make_case_id(config.instance_id, mode_id, binding.label, seed),
        instance_id=config.instance_id,
        source_id=config.source_id,
        authority_mode=mode_id,
        controller=binding.label,
        seed=seed,
        framework=framework,
        status=world.status,
        deadlocked=world.deadlocked,
        truncated=world.truncated,
        clock=world.clock,
        epochs=world.epochs,
        budgets={
            "energy_cap": config.budgets.energy_cap,
            "carbon_cap": config.budgets.carbon_cap,
            "carbon_intensity": config.budgets.carbon_intensity,
        },
        events=list(world.event_trace),
        activations=list(activation_records),
        protocol=list(world.protocol_records),
        settlements=list(world.settlement_records),
        contracts=contracts,
        jobs=engine.job_table(world),
        accounting=accounting,
        audit=audit.as_dict(),
        wall_seconds=wall,
    )


# ---------------------------------------------------------------------------
# persistence


def _dump(path: Path, document: dict) -> None:
    path.write_text(json.dumps(document, sort_keys=True, separators=(",", ":")) + "\n")


def persist_episode(output_dir: str | Path, trace: EpisodeTrace) -> dict[str, str]:
    """Write the four trace files; returns artifact name -> relative path."""
    case_dir = Path(output_dir) / "cases" / trace.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": 1,
        "instance_id": trace.instance_id,
        "source_id": trace.source_id,
        "authority_mode": trace.authority_mode,
        "controller": trace.controller,
        "seed": trace.seed,
        "framework": trace.framework,
    }
    _dump(
        case_dir / "world_event_trace.json",
        {
            "case_id": trace.case_id,
            "meta": meta,
            "status": {
                "status": trace.status,
                "deadlocked": trace.deadlocked,
                "truncated": trace.truncated,
                "clock": trace.clock,
                "epochs": trace.epochs,
            },
            "accounting": {
                **trace.accounting,
                "budgets": trace.budgets,
                "jobs": trace.jobs,
                "contracts": trace.contracts,
            },
            "audit": trace.audit,
            "events": trace.events,
        },
    )
    _dump(case_dir / "activation_trace.json", {"case_id": trace.case_id, "records": trace.activations})
    _dump(case_dir / "protocol_trace.json", {"case_id": trace.case_id, "records": trace.protocol})
    _dump(case_dir / "settlement_trace.json", {"case_id": trace.case_id, "records": trace.settlements})
    return {name: str(Path("cases") / trace.case_id / name) for name in TRACE_FILES}


def load_episode(output_dir: str | Path, case_id: str) -> EpisodeTrace:
    """Rebuild an EpisodeTrace from its four persisted files."""
    case_dir = Path(output_dir) / "cases" / case_id
    world_doc = json.loads((case_dir / "world_event_trace.json").read_text())
    activation_doc = json.loads((case_dir / "activation_trace.json").read_text())
    protocol_doc = json.loads((case_dir / "protocol_trace.json").read_text())
    settlement_doc = json.loads((case_dir / "settlement_trace.json").read_text())
    meta = world_doc["meta"]
    status = world_doc["status"]
    accounting = dict(world_doc["accounting"])
    budgets = accounting.pop("budgets")
    jobs = accounting.pop("jobs")
    contracts = accounting.pop("contracts")
    return EpisodeTrace(
        case_id=world_doc["case_id"],
        instance_id=meta["instance_id"],
        source_id=meta["source_id"],
        authority_mode=meta["authority_mode"],
        controller=meta["controller"],
        seed=meta["seed"],
        framework=meta["framework"],
        status=status["status"],
        deadlocked=status["deadlocked"],
        truncated=status["truncated"],
        clock=status["clock"],
        epochs=status["epochs"],
        budgets=budgets,
        events=world_doc["events"],
        activations=activation_doc["records"],
        protocol=protocol_doc["records"],
        settlements=settlement_doc["records"],
        contracts=contracts,
        jobs=jobs,
        accounting=accounting,
        audit=world_doc["audit"],
        wall_seconds=None,
    )


def case_is_persisted(output_dir: str | Path, case_id: str) -> bool:
    case_dir = Path(output_dir) / "cases" / case_id
    return all((case_dir / name).is_file() for name in TRACE_FILES)


# ---------------------------------------------------------------------------
# suite orchestration


def _execute_case(args: tuple) -> tuple[str, MetricRecord, float]:
    instance_ref, mode_id, binding, seed, framework, output_dir = args
    config = load_instance(instance_ref)
    result = run_episode(config, mode_id, binding, seed, framework)
    persist_episode(output_dir, result.trace)
    return result.trace.case_id, result.record, result.wall_seconds


def run_suite(request: RunRequest) -> list[MetricRecord]:
    out_dir = Path(request.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = {ref: load_instance(ref) for ref in request.instances}

    tasks: list[tuple] = []
    done_records: list[MetricRecord] = []
    wall_by_case: dict[str, float] = {}
    progress_path = out_dir / "progress_log.jsonl"
    for ref in request.instances:
        config = configs[ref]
        for mode_id in request.mode_ids:
            paradigms.get_authority_mode(mode_id)
            for seed in request.seeds:
                case_id = make_case_id(config.instance_id, mode_id, request.binding.label, seed)
                if case_is_persisted(out_dir, case_id):
                    done_records.append(compute_episode_metrics(load_episode(out_dir, case_id)))
                    continue
                tasks.append((ref, mode_id, request.binding, seed, request.framework, str(out_dir)))

    def note_progress(case_id: str, record: MetricRecord, wall: float) -> None:
        wall_by_case[case_id] = wall
        with progress_path.open("a") as handle:
            handle.write(
                json.dumps(
                    {"case_id": case_id, "status": record.status, "wall_seconds": wall},
                    sort_keys=True,
                )
                + "\n"
            )
        _write_snapshot(out_dir, done_records)

    if request.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=request.jobs) as pool:
            pending = {pool.submit(_execute_case, task) for task in tasks}
            while pending:
                finished, pending = wait(pending, return_when=FIRST_COMPLETED)
                for future in finished:
                    case_id, record, wall = future.result()
                    done_records.append(record)
                    note_progress(case_id, record, wall)
    else:
        for task in tasks:
            case_id, record, wall = _execute_case(task)
            done_records.append(record)
            note_progress(case_id, record, wall)

    done_records.sort(key=lambda r: (r.instance_id, r.authority_mode, r.controller, r.seed))
    _write_summary(out_dir, done_records)
    _write_suite_summary(out_dir, done_records, wall_by_case)
    _write_artifacts(out_dir, done_records)
    _write_snapshot(out_dir, done_records)
    return done_records


def _write_summary(out_dir: Path, records: list[MetricRecord]) -> None:
    with (out_dir / "summary.csv").open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(CSV_COLUMNS))
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())


def _write_suite_summary(out_dir: Path, records: list[MetricRecord], wall_by_case: dict[str, float]) -> None:
    rows = aggregate_suite(records, wall_by_case)
    with (out_dir / "suite_summary.csv").open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(SUITE_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _write_artifacts(out_dir: Path, records: list[MetricRecord]) -> None:
    with (out_dir / "artifacts.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["case_id", "artifact", "path"])
        for record in records:
            for name in TRACE_FILES:
                writer.writerow([record.case_id, name, str(Path("cases") / record.case_id / name)])


def _write_snapshot(out_dir: Path, records: list[MetricRecord]) -> None:
    snapshot = {
        "completed_cases": sorted(r.case_id for r in records),
        "count": len(records),
    }
    (out_dir / "progress_snapshot.json").write_text(json.dumps(snapshot, sort_keys=True, indent=1) + "\n")


def run_case(request: RunRequest, case_id: str) -> MetricRecord:
    """Run (or re-run) one case by id; artifacts land in the same layout."""
    instance_id, mode_id, controller, seed = parse_case_id(case_id)
    if controller != request.binding.label:
        raise ValueError(
            f"case {case_id!r} was produced by controller {controller!r}; "
            f"the current binding is {request.binding.label!r}"
        )
    config = load_instance(instance_id)
    result = run_episode(config, mode_id, request.binding, seed, request.framework)
    out_dir = Path(request.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    persist_episode(out_dir, result.trace)
    return result.record


def recompute_case(output_dir: str | Path, case_id: str) -> MetricRecord:
    """Offline metric recomputation from the persisted trace files alone."""
    return compute_episode_metrics(load_episode(output_dir, case_id))
