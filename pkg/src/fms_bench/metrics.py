"""Metric catalog: one episode trace in, one 58-field record out.

Every value is recomputable from the persisted trace files alone; nothing is
measured during the run except wall-clock seconds, which is why the wc field
stays empty in per-case rows and only its seed mean appears in the suite
summary.  Width and rate means over an empty record set are reported as 0.0
(a mode that never exposes a decision kind scores zero width for it); true
"not applicable" values (throughput without a clock, batch size without
arrivals) stay None and serialize to empty CSV cells.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, fields

#: short code -> CSV column, in column order
METRIC_COLUMNS: tuple[tuple[str, str], ...] = (
    ("mk", "makespan"),
    ("td", "tardiness_completed"),
    ("tcd", "tardiness_completion_debt"),
    ("cj", "completed_jobs"),
    ("th", "throughput"),
    ("sr", "success_rate"),
    ("en", "energy_kwh"),
    ("co", "carbon_kg"),
    ("vc", "violation_count"),
    ("eo", "energy_overshoot_magnitude"),
    ("ed", "energy_overshoot_duration"),
    ("eof", "energy_overshoot_frequency"),
    ("com", "carbon_overshoot_magnitude"),
    ("cod", "carbon_overshoot_duration"),
    ("cof", "carbon_overshoot_frequency"),
    ("vm", "mixed_violation_magnitude"),
    ("vb", "backlog_branching_width"),
    ("bc", "backlog_decision_count"),
    ("pa", "plant_routing_width"),
    ("ac", "area_routing_width"),
    ("dw", "dispatch_width"),
    ("ba", "backlog_ambiguity_rate"),
    ("paa", "plant_routing_ambiguity_rate"),
    ("aa", "area_routing_ambiguity_rate"),
    ("ca", "dispatch_ambiguity_rate"),
    ("ds", "decision_steps"),
    ("cm", "coordination_messages"),
    ("al", "active_agent_load"),
    ("wc", "runtime_mean_seconds"),
    ("llm", "framework_llm_decision_count"),
    ("fb", "framework_fallback_contract_decision_count"),
    ("na", "framework_no_legal_action_count"),
    ("p1", "framework_pass_at_1_mean"),
    ("dl", "deadlock_rate"),
    ("tr", "truncation_rate"),
    ("ut", "unfinished_overdue_tardiness"),
    ("dj", "completion_debt_jobs"),
    ("do", "completion_debt_operations"),
    ("st", "setup_time"),
    ("su", "setup_energy"),
    ("tt", "transport_time"),
    ("te", "transport_energy"),
    ("tm", "transport_moves"),
    ("ic", "intercell_moves"),
    ("bt", "blocking_time"),
    ("bw", "buffer_wait_time"),
    ("ae", "arrival_events"),
    ("aj", "arrived_jobs"),
    ("ab", "arrival_batch_size"),
    ("bd", "breakdown_count"),
    ("dt", "downtime"),
    ("rt", "repair_time"),
    ("ar", "activation_records"),
    ("as_", "decided_activations"),
    ("sv", "settlement_events"),
    ("sc", "settled_contracts"),
    ("oc", "open_contracts"),
    ("uc", "unsettled_completed_contracts"),
)

META_COLUMNS = ("case_id", "instance_id", "source_id", "authority_mode", "controller", "seed", "framework", "status")

CSV_COLUMNS = META_COLUMNS + tuple(column for _, column in METRIC_COLUMNS)


@dataclass
class EpisodeTrace:
    """Everything persisted for one episode, reassembled in memory."""

    case_id: str
    instance_id: str
    source_id: str
    authority_mode: str
    controller: str
    seed: int
    framework: str
    status: str
    deadlocked: bool
    truncated: bool
    clock: float
    epochs: int
    budgets: dict
    events: list[dict] = field(default_factory=list)
    activations: list[dict] = field(default_factory=list)
    protocol: list[dict] = field(default_factory=list)
    settlements: list[dict] = field(default_factory=list)
    contracts: list[dict] = field(default_factory=list)
    jobs: list[dict] = field(default_factory=list)
    accounting: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    wall_seconds: float | None = None


@dataclass
class MetricRecord:
    case_id: str = ""
    instance_id: str = ""
    source_id: str = ""
    authority_mode: str = ""
    controller: str = ""
    seed: int = 0
    framework: str = ""
    status: str = ""
    mk: float | None = None
    td: float | None = None
    tcd: float | None = None
    cj: int | None = None
    th: float | None = None
    sr: float | None = None
    en: float | None = None
    co: float | None = None
    vc: int | None = None
    eo: float | None = None
    ed: float | None = None
    eof: int | None = None
    com: float | None = None
    cod: float | None = None
    cof: int | None = None
    vm: float | None = None
    vb: float | None = None
    bc: int | None = None
    pa: float | None = None
    ac: float | None = None
    dw: float | None = None
    ba: float | None = None
    paa: float | None = None
    aa: float | None = None
    ca: float | None = None
    ds: int | None = None
    cm: int | None = None
    al: float | None = None
    wc: float | None = None
    llm: int | None = None
    fb: int | None = None
    na: int | None = None
    p1: float | None = None
    dl: float | None = None
    tr: float | None = None
    ut: float | None = None
    dj: int | None = None
    do: int | None = None
    st: float | None = None
    su: float | None = None
    tt: float | None = None
    te: float | None = None
    tm: int | None = None
    ic: int | None = None
    bt: float | None = None
    bw: float | None = None
    ae: int | None = None
    aj: int | None = None
    ab: float | None = None
    bd: int | None = None
    dt: float | None = None
    rt: float | None = None
    ar: int | None = None
    as_: int | None = None
    sv: int | None = None
    sc: int | None = None
    oc: int | None = None
    uc: int | None = None

    def to_row(self) -> dict[str, str]:
        row = {column: _csv_value(getattr(self, column)) for column in META_COLUMNS}
        for code, column in METRIC_COLUMNS:
            row[column] = _csv_value(getattr(self, code))
        return row


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class OvershootSummary:
    magnitude: float
    duration: float
    frequency: int


def compute_overshoot(series: list[tuple[float, float]], cap: float, end_time: float) -> OvershootSummary:
    """Excess over a rate cap, integrated over a piecewise-constant series.

    series holds (time, rate) change points sorted by time; each rate holds
    until the next point, the last one until end_time.  Contiguous over-cap
    segments merge into a single overshoot interval.
    """
    magnitude = 0.0
    duration = 0.0
    frequency = 0
    in_excess = False
    for i, (t, rate) in enumerate(series):
        t_next = series[i + 1][0] if i + 1 < len(series) else end_time
        width = max(0.0, t_next - t)
        if rate > cap and width > 0:
            magnitude += (rate - cap) * width
            duration += width
            if not in_excess:
                frequency += 1
                in_excess = True
        elif width > 0:
            in_excess = False
    return OvershootSummary(magnitude, duration, frequency)


def _mean_width(records: list[dict], kind: str, extra=None) -> tuple[float, float, int]:
    """(mean width, ambiguity rate, count) over one decision kind."""
    widths = [r["legal_count"] for r in records if r["kind"] == kind and (extra is None or extra(r))]
    if not widths:
        return 0.0, 0.0, 0
    mean = sum(widths) / len(widths)
    ambiguous = sum(1 for w in widths if w >= 2) / len(widths)
    return mean, ambiguous, len(widths)


def compute_episode_metrics(trace: EpisodeTrace) -> MetricRecord:
    acc = trace.accounting
    budgets = trace.budgets
    rec = MetricRecord(
        case_id=trace.case_id,
        instance_id=trace.instance_id,
        source_id=trace.source_id,
        authority_mode=trace.authority_mode,
        controller=trace.controller,
        seed=trace.seed,
        framework=trace.framework,
        status=trace.status,
    )

    rec.mk = trace.clock
    completed = [j for j in trace.jobs if j["completed_at"] is not None]
    unfinished = [j for j in trace.jobs if j["completed_at"] is None]
    rec.td = sum(max(0.0, j["completed_at"] - j["due_date"]) for j in completed)
    rec.ut = sum(max(0.0, trace.clock - j["due_date"]) for j in unfinished)
    rec.tcd = rec.td + rec.ut
    rec.cj = len(completed)
    rec.th = rec.cj / rec.mk if rec.mk > 0 else None
    rec.sr = 1.0 if trace.status == "done" else 0.0
    rec.dl = 1.0 if trace.deadlocked else 0.0
    rec.tr = 1.0 if trace.truncated else 0.0
    rec.dj = len(unfinished)
    rec.do = sum(j["stages_total"] - j["stages_done"] for j in unfinished)

    rec.en = acc["processing_energy"] + acc["setup_energy"] + acc["transport_energy"]
    rec.co = budgets["carbon_intensity"] * rec.en
    series = [tuple(p) for p in acc["rate_series"]]
    energy = compute_overshoot(series, budgets["energy_cap"], trace.clock)
    carbon_series = [(t, budgets["carbon_intensity"] * r) for t, r in series]
    carbon = compute_overshoot(carbon_series, budgets["carbon_cap"], trace.clock)
    rec.eo, rec.ed, rec.eof = energy.magnitude, energy.duration, energy.frequency
    rec.com, rec.cod, rec.cof = carbon.magnitude, carbon.duration, carbon.frequency
    rec.vm = rec.eo + rec.com
    rec.vc = rec.eof + rec.cof

    records = trace.activations
    rec.vb, rec.ba, rec.bc = _mean_width(records, "backlog_selection")
    rec.pa, rec.paa, _ = _mean_width(records, "area_selection")
    rec.ac, rec.aa, _ = _mean_width(records, "cell_selection", extra=lambda r: r["role"] == "area")
    rec.dw, rec.ca, _ = _mean_width(records, "local_dispatch")
    rec.ar = len(records)
    rec.as_ = sum(1 for r in records if r["action"] is not None)
    rec.ds = rec.as_
    rec.cm = len(trace.protocol)
    epochs_seen = {r["epoch"] for r in records}
    rec.al = rec.ar / len(epochs_seen) if epochs_seen else 0.0
    rec.wc = None

    audit = trace.audit
    rec.llm = audit.get("controller_decisions", 0)
    rec.fb = audit.get("fallback_decisions", 0) + audit.get("fallback_contracts", 0)
    rec.na = audit.get("no_legal_action", 0)
    rec.p1 = audit.get("pass_at_1")

    rec.st = acc["setup_time"]
    rec.su = acc["setup_energy"]
    rec.tt = acc["transport_time"]
    rec.te = acc["transport_energy"]
    rec.tm = acc["transport_moves"]
    rec.ic = acc["transport_moves"]
    rec.bt = acc["blocking_time"]
    rec.bw = acc["buffer_wait_time"]
    rec.ae = acc["arrival_events"]
    rec.aj = acc["arrived_jobs"]
    rec.ab = rec.aj / rec.ae if rec.ae else None
    rec.bd = acc["breakdown_count"]
    rec.dt = acc["downtime"]
    rec.rt = acc["repair_time"]

    rec.sv = len(trace.settlements)
    rec.sc = sum(1 for c in trace.contracts if c["state"] == "settled")
    rec.oc = sum(1 for c in trace.contracts if c["state"] == "open")
    done_by_job = {j["job_id"]: j["stages_done"] for j in trace.jobs}
    rec.uc = sum(
        1
        for c in trace.contracts
        if c["state"] in ("committed", "dispatched") and done_by_job.get(c["job_id"], 0) > c["stage_index"]
    )
    return rec


def aggregate_suite(records: list[MetricRecord], wall_by_case: dict[str, float] | None = None) -> list[dict]:
    """Seed means per (instance, mode, controller) group, plus makespan spread."""
    wall_by_case = wall_by_case or {}
    groups: dict[tuple, list[MetricRecord]] = {}
    for rec in records:
        groups.setdefault((rec.instance_id, rec.authority_mode, rec.controller, rec.framework), []).append(rec)
    rows = []
    for key in sorted(groups):
        instance_id, mode, controller, framework = key
        members = groups[key]
        row: dict[str, str] = {
            "instance_id": instance_id,
            "source_id": members[0].source_id,
            "authority_mode": mode,
            "controller": controller,
            "framework": framework,
            "seeds": str(len(members)),
        }
        mks = [r.mk for r in members if r.mk is not None]
        row["makespan_std"] = _csv_value(statistics.pstdev(mks) if len(mks) > 1 else 0.0)
        for code, column in METRIC_COLUMNS:
            if code == "wc":
                walls = [wall_by_case[r.case_id] for r in members if r.case_id in wall_by_case]
                row[column] = _csv_value(sum(walls) / len(walls) if walls else None)
                continue
            values = [getattr(r, code) for r in members]
            values = [v for v in values if v is not None]
            row[column] = _csv_value(sum(values) / len(values) if values else None)
        rows.append(row)
    return rows


SUITE_COLUMNS = (
    "instance_id",
    "source_id",
    "authority_mode",
    "controller",
    "framework",
    "seeds",
    "makespan_std",
) + tuple(column for _, column in METRIC_COLUMNS)
