"""Instance model: plant hierarchy, job routes, budgets, and scenario profiles.

An instance document is a JSON file with a mandatory schema_version and the
sections hierarchy / jobs_or_grammar / budgets / failure_profile / scenario /
energy_model / limits.  Documents either list jobs explicitly or carry a
seeded route grammar from which the job set is generated deterministically.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

SHIPPED_DOCUMENTS = ("a3c9_1", "a5c12_1", "a5c12_2", "a5c12_3")

FAILURE_KINDS = ("weibull_aging", "exponential_nominal", "load_dependent")


class SchemaError(Exception):
    """Raised when a document is structurally unreadable or versioned wrong."""


class ValidationError(Exception):
    """Raised when a structurally valid document violates model invariants."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass(frozen=True)
class Hierarchy:
    """Rooted plant -> area -> cell -> machine topology."""

    plant_id: str
    partition: tuple[int, ...]
    machines_per_cell: int

    @property
    def areas(self) -> tuple[int, ...]:
        return tuple(range(len(self.partition)))

    @property
    def cells(self) -> tuple[int, ...]:
        return tuple(range(sum(self.partition)))

    def area_of(self, cell: int) -> int:
        used = 0
        for area, size in enumerate(self.partition):
            if cell < used + size:
                return area
            used += size
        raise KeyError(f"cell {cell} outside hierarchy")

    def cells_in(self, area: int) -> tuple[int, ...]:
        start = sum(self.partition[:area])
        return tuple(range(start, start + self.partition[area]))

    def machines_in(self, cell: int) -> tuple[str, ...]:
        return tuple(f"m{cell}_{k}" for k in range(self.machines_per_cell))

    @property
    def machines(self) -> tuple[str, ...]:
        out: list[str] = []
        for cell in self.cells:
            out.extend(self.machines_in(cell))
        return tuple(out)

    def cell_of_machine(self, machine: str) -> int:
        if not machine.startswith("m"):
            raise KeyError(machine)
        return int(machine[1:].split("_", 1)[0])


@dataclass(frozen=True)
class RouteStage:
    """One ordered operation of a job route."""

    stage_index: int
    eligible_cells: tuple[int, ...]
    base_processing_time: float
    setup_family: str


@dataclass(frozen=True)
class JobSpec:
    job_id: int
    route: tuple[RouteStage, ...]
    release_time: float
    due_date: float


@dataclass(frozen=True)
class FailureProfile:
    kind: str
    parameters: dict[str, float]
    repair_low: float = 2.0
    repair_high: float = 4.0


@dataclass(frozen=True)
class Budgets:
    """Shared resource budgets; caps are rates per unit time."""

    energy_cap: float
    carbon_cap: float
    carbon_intensity: float
    wip_cap: int


@dataclass(frozen=True)
class RouteGrammar:
    """Seeded sampler producing a fixed route surface per instance."""

    name: str
    seed: int
    jobs: int
    stages: int
    areas_per_stage: dict[int, float]
    cells_per_area: dict[int, float]
    base_processing_times: tuple[float, ...]
    setup_families: int
    due_slack_factor: float = 1.5


@dataclass(frozen=True)
class ScenarioProfile:
    name: str
    backlog_top_k: int
    transport_multiplier: float
    inbound_cap: int
    speed_modifiers: dict[int, float]
    initial_backlog_job_ids: tuple[int, ...]
    arrival_plan: tuple[tuple[float, tuple[int, ...]], ...]
    bid_candidate_cap: int = 3
    due_slack_factor: float = 1.5


@dataclass(frozen=True)
class EnergyModel:
    processing_power: float = 100.0
    setup_power: float = 6.0
    transport_power: float = 0.2
    setup_duration: float = 0.5


@dataclass(frozen=True)
class Limits:
    horizon_limit: int = 400
    no_progress_window: int = 50


@dataclass(frozen=True)
class InstanceConfig:
    schema_version: int
    instance_id: str
    source_id: str
    hierarchy: Hierarchy
    budgets: Budgets
    failure_profile: FailureProfile
    scenario: ScenarioProfile
    energy_model: EnergyModel
    limits: Limits
    grammar: RouteGrammar | None = None
    explicit_jobs: tuple[JobSpec, ...] | None = None

    @property
    def job_count(self) -> int:
        if self.grammar is not None:
            return self.grammar.jobs
        assert self.explicit_jobs is not None
        return len(self.explicit_jobs)


def _require(mapping: dict[str, Any], key: str, where: str) -> Any:
    if key not in mapping:
        raise SchemaError(f"{where}: missing required key '{key}'")
    return mapping[key]


def _int_keys(mapping: dict[str, Any], where: str) -> dict[int, float]:
    try:
        return {int(k): float(v) for k, v in mapping.items()}
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: keys must be integers ({exc})") from exc


def _parse_document(doc: dict[str, Any]) -> InstanceConfig:
    if not isinstance(doc, dict):
        raise SchemaError("document root must be an object")
    version = _require(doc, "schema_version", "document")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unknown schema_version {version!r} (expected {SCHEMA_VERSION})")

    hsec = _require(doc, "hierarchy", "document")
    hierarchy = Hierarchy(
        plant_id=hsec.get("plant_id", "plant"),
        partition=tuple(int(x) for x in _require(hsec, "partition", "hierarchy")),
        machines_per_cell=int(hsec.get("machines_per_cell", 2)),
    )

    bsec = _require(doc, "budgets", "document")
    budgets = Budgets(
        energy_cap=float(_require(bsec, "energy_cap", "budgets")),
        carbon_cap=float(_require(bsec, "carbon_cap", "budgets")),
        carbon_intensity=float(bsec.get("carbon_intensity", 0.6)),
        wip_cap=int(bsec.get("wip_cap", 4)),
    )

    fsec = _require(doc, "failure_profile", "document")
    repair = fsec.get("repair_time", {})
    failure = FailureProfile(
        kind=_require(fsec, "kind", "failure_profile"),
        parameters={k: float(v) for k, v in fsec.get("parameters", {}).items()},
        repair_low=float(repair.get("low", 2.0)),
        repair_high=float(repair.get("high", 4.0)),
    )

    ssec = _require(doc, "scenario", "document")
    plan: list[tuple[float, tuple[int, ...]]] = []
    for entry in ssec.get("arrival_plan", []):
        plan.append((float(entry["time"]), tuple(int(j) for j in entry["job_ids"])))
    scenario = ScenarioProfile(
        name=ssec.get("name", doc.get("instance_id", "scenario")),
        backlog_top_k=int(ssec.get("backlog_top_k", 3)),
        transport_multiplier=float(ssec.get("transport_multiplier", 1.0)),
        inbound_cap=int(ssec.get("inbound_cap", 1)),
        speed_modifiers=_int_keys(ssec.get("speed_modifiers", {}), "scenario.speed_modifiers"),
        initial_backlog_job_ids=tuple(int(j) for j in ssec.get("initial_backlog_job_ids", [])),
        arrival_plan=tuple(plan),
        bid_candidate_cap=int(ssec.get("bid_candidate_cap", 3)),
        due_slack_factor=float(ssec.get("due_slack_factor", 1.5)),
    )

    esec = doc.get("energy_model", {})
    energy = EnergyModel(
        processing_power=float(esec.get("processing_power", 100.0)),
        setup_power=float(esec.get("setup_power", 6.0)),
        transport_power=float(esec.get("transport_power", 0.2)),
        setup_duration=float(esec.get("setup_duration", 0.5)),
    )

    lsec = doc.get("limits", {})
    limits = Limits(
        horizon_limit=int(lsec.get("horizon_limit", 400)),
        no_progress_window=int(lsec.get("no_progress_window", 50)),
    )

    jsec = _require(doc, "jobs_or_grammar", "document")
    grammar: RouteGrammar | None = None
    explicit: tuple[JobSpec, ...] | None = None
    if "grammar" in jsec:
        g = jsec["grammar"]
        grammar = RouteGrammar(
            name=_require(g, "name", "grammar"),
            seed=int(_require(g, "seed", "grammar")),
            jobs=int(_require(g, "jobs", "grammar")),
            stages=int(_require(g, "stages", "grammar")),
            areas_per_stage=_int_keys(_require(g, "areas_per_stage", "grammar"), "grammar.areas_per_stage"),
            cells_per_area=_int_keys(_require(g, "cells_per_area", "grammar"), "grammar.cells_per_area"),
            base_processing_times=tuple(float(x) for x in _require(g, "base_processing_times", "grammar")),
            setup_families=int(g.get("setup_families", 3)),
            due_slack_factor=float(g.get("due_slack_factor", 1.5)),
        )
    elif "jobs" in jsec:
        jobs: list[JobSpec] = []
        for j in jsec["jobs"]:
            route = tuple(
                RouteStage(
                    stage_index=i,
                    eligible_cells=tuple(int(c) for c in st["eligible_cells"]),
                    base_processing_time=float(st["base_processing_time"]),
                    setup_family=str(st.get("setup_family", "F0")),
                )
                for i, st in enumerate(j["route"])
            )
            release = float(j.get("release_time", 0.0))
            total = sum(st.base_processing_time for st in route)
            due = float(j.get("due_date", release + scenario.due_slack_factor * total))
            jobs.append(JobSpec(job_id=int(j["job_id"]), route=route, release_time=release, due_date=due))
        explicit = tuple(jobs)
    else:
        raise SchemaError("jobs_or_grammar: needs either 'grammar' or 'jobs'")

    return InstanceConfig(
        schema_version=int(version),
        instance_id=str(_require(doc, "instance_id", "document")),
        source_id=str(doc.get("source_id", doc["instance_id"])),
        hierarchy=hierarchy,
        budgets=budgets,
        failure_profile=failure,
        scenario=scenario,
        energy_model=energy,
        limits=limits,
        grammar=grammar,
        explicit_jobs=explicit,
    )


def load_instance(ref: str | Path) -> InstanceConfig:
    """Load an instance document by shipped id or filesystem path.

    Raises SchemaError for unreadable/mis-versioned documents and
    ValidationError when the parsed document violates model invariants.
    """
    path = Path(ref)
    if path.suffix == ".json" and path.exists():
        text = path.read_text()
    elif str(ref) in SHIPPED_DOCUMENTS:
        text = resources.files("fms_bench.documents").joinpath(f"{ref}.json").read_text()
    else:
        raise SchemaError(f"unknown instance reference {ref!r}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"document is not valid JSON: {exc}") from exc
    config = _parse_document(doc)
    violations = validate_instance(config)
    if violations:
        raise ValidationError(violations)
    return config


def validate_instance(config: InstanceConfig) -> list[str]:
    """Return the list of invariant violations (empty when the config is sound)."""
    out: list[str] = []
    h = config.hierarchy
    if not h.partition or any(p < 1 for p in h.partition):
        out.append("hierarchy.partition: every area needs at least one cell")
    if h.machines_per_cell < 1:
        out.append("hierarchy.machines_per_cell: must be >= 1")

    b = config.budgets
    if b.wip_cap < 1:
        out.append("budgets.wip_cap: must be >= 1")
    if b.energy_cap <= 0:
        out.append("budgets.energy_cap: must be > 0")
    expected_carbon = b.carbon_intensity * b.energy_cap
    if not math.isclose(b.carbon_cap, expected_carbon, rel_tol=1e-12, abs_tol=1e-12):
        out.append(
            f"budgets.carbon_cap: must equal carbon_intensity*energy_cap "
            f"({expected_carbon!r}, got {b.carbon_cap!r})"
        )

    if config.failure_profile.kind not in FAILURE_KINDS:
        out.append(f"failure_profile.kind: unknown kind {config.failure_profile.kind!r}")
    if config.failure_profile.repair_low > config.failure_profile.repair_high:
        out.append("failure_profile.repair_time: low > high")

    s = config.scenario
    if s.backlog_top_k < 1:
        out.append("scenario.backlog_top_k: must be >= 1")
    if s.inbound_cap < 1:
        out.append("scenario.inbound_cap: must be >= 1")
    if s.transport_multiplier <= 0:
        out.append("scenario.transport_multiplier: must be > 0")
    cells = set(h.cells)
    for cell, mod in s.speed_modifiers.items():
        if cell not in cells:
            out.append(f"scenario.speed_modifiers[{cell}]: cell not in hierarchy")
        if mod <= 0:
            out.append(f"scenario.speed_modifiers[{cell}]: modifier must be > 0")

    if config.limits.horizon_limit < 1 or config.limits.no_progress_window < 1:
        out.append("limits: horizon_limit and no_progress_window must be >= 1")

    # Arrival split must cover every job exactly once.
    job_ids = list(range(config.grammar.jobs)) if config.grammar else [
        j.job_id for j in (config.explicit_jobs or ())
    ]
    seen = list(s.initial_backlog_job_ids)
    for _, batch in s.arrival_plan:
        seen.extend(batch)
    if job_ids and (s.initial_backlog_job_ids or s.arrival_plan):
        if sorted(seen) != sorted(job_ids):
            out.append("scenario: initial backlog + arrival plan must cover each job exactly once")
    times = [t for t, _ in s.arrival_plan]
    if times != sorted(times):
        out.append("scenario.arrival_plan: entries must be time-ordered")
    if any(t < 0 for t in times):
        out.append("scenario.arrival_plan: times must be >= 0")

    if config.grammar is not None:
        g = config.grammar
        if g.jobs < 1 or g.stages < 1:
            out.append("grammar: jobs and stages must be >= 1")
        if any(k < 2 for k in g.areas_per_stage) and len(h.partition) >= 2:
            out.append("grammar.areas_per_stage: eligible sets must span >= 2 areas per stage")
        if any(t <= 0 for t in g.base_processing_times):
            out.append("grammar.base_processing_times: must be > 0")
        if abs(sum(g.areas_per_stage.values()) - 1.0) > 1e-9:
            out.append("grammar.areas_per_stage: weights must sum to 1")
        if abs(sum(g.cells_per_area.values()) - 1.0) > 1e-9:
            out.append("grammar.cells_per_area: weights must sum to 1")
    if config.explicit_jobs is not None:
        for j in config.explicit_jobs:
            if not j.route:
                out.append(f"jobs[{j.job_id}].route: must be nonempty")
            for st in j.route:
                if not st.eligible_cells:
                    out.append(f"jobs[{j.job_id}].route[{st.stage_index}]: eligible_cells empty")
                for c in st.eligible_cells:
                    if c not in cells:
                        out.append(
                            f"jobs[{j.job_id}].route[{st.stage_index}]: cell {c} not in hierarchy"
                        )
                if st.base_processing_time <= 0:
                    out.append(
                        f"jobs[{j.job_id}].route[{st.stage_index}]: base_processing_time must be > 0"
                    )
    return out


def _weighted_choice(rng: random.Random, weights: dict[int, float]) -> int:
    keys = sorted(weights)
    pick = rng.random()
    acc = 0.0
    for k in keys:
        acc += weights[k]
        if pick < acc:
            return k
    return keys[-1]


def _release_times(config: InstanceConfig) -> dict[int, float]:
    out: dict[int, float] = {}
    for j in config.scenario.initial_backlog_job_ids:
        out[j] = 0.0
    for t, batch in config.scenario.arrival_plan:
        for j in batch:
            out[j] = t
    return out


def generate_jobs(config: InstanceConfig, seed: int) -> tuple[JobSpec, ...]:
    """Materialize the job set for an instance.

    With an explicit jobs section the document content is returned as-is.
    With a grammar the route surface is sampled from the given seed; the
    same (config, seed) pair always produces the identical job set.
    """
    if config.explicit_jobs is not None:
        return config.explicit_jobs
    g = config.grammar
    assert g is not None
    h = config.hierarchy
    rng = random.Random(seed)
    releases = _release_times(config)
    jobs: list[JobSpec] = []
    for job_id in range(g.jobs):
        route: list[RouteStage] = []
        for stage in range(g.stages):
            n_areas = min(_weighted_choice(rng, g.areas_per_stage), len(h.partition))
            areas = sorted(rng.sample(list(h.areas), n_areas))
            cells: list[int] = []
            for area in areas:
                pool = list(h.cells_in(area))
                k = min(_weighted_choice(rng, g.cells_per_area), len(pool))
                cells.extend(rng.sample(pool, k))
            base = rng.choice(list(g.base_processing_times))
            family = f"F{rng.randrange(g.setup_families)}"
            route.append(
                RouteStage(
                    stage_index=stage,
                    eligible_cells=tuple(sorted(cells)),
                    base_processing_time=base,
                    setup_family=family,
                )
            )
        release = releases.get(job_id, 0.0)
        total = sum(st.base_processing_time for st in route)
        due = release + g.due_slack_factor * total
        jobs.append(JobSpec(job_id=job_id, route=tuple(route), release_time=release, due_date=due))
    return tuple(jobs)
