"""Shared toy instances and a compact stepping harness for property tests."""

from __future__ import annotations

from collections import deque

import pytest

from fms_bench import ControllerBinding
from fms_bench.instances import (
    Budgets,
    EnergyModel,
    FailureProfile,
    Hierarchy,
    InstanceConfig,
    JobSpec,
    Limits,
    RouteStage,
    ScenarioProfile,
    validate_instance,
)


def make_stage(index: int, cells, base: float = 2.0, family: str = "F0") -> RouteStage:
    return RouteStage(
        stage_index=index,
        eligible_cells=tuple(sorted(cells)),
        base_processing_time=base,
        setup_family=family,
    )


def make_job(job_id: int, stages, release: float = 0.0, due: float = 50.0) -> JobSpec:
    return JobSpec(job_id=job_id, route=tuple(stages), release_time=release, due_date=due)


def toy_config(
    jobs,
    partition=(1,),
    machines_per_cell: int = 1,
    inbound_cap: int = 1,
    wip_cap: int = 4,
    top_k: int = 3,
    multiplier: float = 1.0,
    failure_kind: str = "exponential_nominal",
    failure_params: dict | None = None,
    speed_modifiers: dict | None = None,
    arrival_plan=(),
    initial=None,
    horizon: int = 400,
    window: int = 50,
    energy_cap: float = 250.0,
    instance_id: str = "toy",
) -> InstanceConfig:
    jobs = tuple(jobs)
    if initial is None:
        initial = tuple(j.job_id for j in jobs if all(j.job_id not in b for _, b in arrival_plan))
    config = InstanceConfig(
        schema_version=1,
        instance_id=instance_id,
        source_id=instance_id,
        hierarchy=Hierarchy(plant_id="plant", partition=tuple(partition), machines_per_cell=machines_per_cell),
        budgets=Budgets(energy_cap=energy_cap, carbon_cap=0.6 * energy_cap, carbon_intensity=0.6, wip_cap=wip_cap),
        failure_profile=FailureProfile(kind=failure_kind, parameters=failure_params or {"rate": 0.0}),
        scenario=ScenarioProfile(
            name=instance_id,
            backlog_top_k=top_k,
            transport_multiplier=multiplier,
            inbound_cap=inbound_cap,
            speed_modifiers=speed_modifiers or {},
            initial_backlog_job_ids=tuple(initial),
            arrival_plan=tuple((t, tuple(b)) for t, b in arrival_plan),
        ),
        energy_model=EnergyModel(),
        limits=Limits(horizon_limit=horizon, no_progress_window=window),
        explicit_jobs=jobs,
    )
    violations = validate_instance(config)
    assert violations == [], violations
    return config


def blocking_toy() -> InstanceConfig:
    """Two identical jobs through one single-machine cell with one buffer slot."""
    jobs = [
        make_job(0, [make_stage(0, [0])], due=10.0),
        make_job(1, [make_stage(0, [0])], due=10.0),
    ]
    return toy_config(jobs, instance_id="toy_block")


def chain_toy(**kwargs) -> InstanceConfig:
    """Two areas of two cells each, four jobs, two stages spanning both areas."""
    route_a = [make_stage(0, [0, 1, 2], 1.5, "F0"), make_stage(1, [1, 2, 3], 2.0, "F1")]
    route_b = [make_stage(0, [0, 2, 3], 2.0, "F1"), make_stage(1, [0, 1, 3], 1.5, "F0")]
    jobs = [
        make_job(0, route_a, due=30.0),
        make_job(1, route_b, due=30.0),
        make_job(2, route_a, due=40.0),
        make_job(3, route_b, due=40.0),
    ]
    defaults = dict(partition=(2, 2), machines_per_cell=1, inbound_cap=2, instance_id="toy_chain")
    defaults.update(kwargs)
    return toy_config(jobs, **defaults)


def single_area_toy(**kwargs) -> InstanceConfig:
    """One area with two cells; lets scripted rejections exhaust siblings."""
    jobs = [
        make_job(0, [make_stage(0, [0, 1], 2.0, "F0")], due=20.0),
        make_job(1, [make_stage(0, [0, 1], 2.0, "F0")], due=20.0),
    ]
    defaults = dict(partition=(2,), machines_per_cell=1, inbound_cap=2, instance_id="toy_area")
    defaults.update(kwargs)
    return toy_config(jobs, **defaults)


@pytest.fixture
def greedy() -> ControllerBinding:
    return ControllerBinding(kind="rule_greedy")


@pytest.fixture
def seeded_random() -> ControllerBinding:
    return ControllerBinding(kind="rule_random_seeded", seed=11)


class StepHarness:
    """Runs the decision loop with a custom decide function, exposing state.

    decide_fn(payload, activation) -> action index.  After each advance or
    commit the harness invokes every registered probe with the live world.
    """

    def __init__(self, config: InstanceConfig, mode_id: str, decide_fn, seed: int = 0):
        from fms_bench import engine, interpreter, paradigms

        self.engine = engine
        self.interpreter = interpreter
        self.config = config
        self.mode = paradigms.get_authority_mode(mode_id)
        self.world = engine.init_world(config, seed)
        self.runtime = paradigms.ProtocolRuntime(self.mode, self.world)
        self.decide_fn = decide_fn
        self.payloads: list[dict] = []
        self.records: list[dict] = []
        self.probes: list = []
        self.memory: deque[str] = deque(maxlen=3)

    def run(self, max_epochs: int = 5000) -> "StepHarness":
        world = self.world
        realized: list[dict] = []
        while world.status == "running":
            acts = self.interpreter.interpret(world, self.mode, realized)
            if not acts:
                realized = self.engine.advance(world)
                self._drain()
                for probe in self.probes:
                    probe(world)
                continue
            bid_step = None
            bid_responses: dict[int, int] = {}
            for act in acts:
                payload = self.interpreter.build_payload(world, act, world.epochs, realized, list(self.memory))
                self.payloads.append(payload)
                action = self.decide_fn(payload, act)
                assert action in payload["legal_actions"]
                self.records.append(
                    {
                        "epoch": world.epochs,
                        "time": world.clock,
                        "agent": act.agent_id,
                        "role": act.role,
                        "kind": act.kind,
                        "cause": act.cause,
                        "loop": act.loop,
                        "job_id": act.job_id,
                        "stage_index": act.stage_index,
                        "legal_count": len(payload["legal_actions"]),
                        "action": action,
                        "source": "controller",
                        "first_pass": True,
                    }
                )
                self.memory.append(f"epoch {world.epochs}: {act.agent_id} {act.kind} -> {action}")
                if act.kind == "bid_submission":
                    bid_step = act.step
                    bid_responses[act.bid_cell] = action
                    continue
                self.runtime.handle_decision(act.kind, act.job_id, action, act.candidates, act.step)
            if bid_step is not None:
                self.runtime.handle_bid_batch(bid_step.job_id, bid_step, bid_responses)
            realized = []
            world.epochs += 1
            self.engine.check_termination(world)
            for probe in self.probes:
                probe(world)
            if world.epochs >= max_epochs:
                raise AssertionError("episode exceeded the test epoch budget")
        self.engine.finalize(world)
        self._drain()
        return self

    def _drain(self) -> None:
        notes = self.world.notifications
        self.world.notifications = []
        for note in notes:
            if note["kind"] == "stage_completed":
                self.runtime.settle_stage(note)


def greedy_decide(payload: dict, _act=None) -> int:
    from fms_bench.controllers import fallback_decide

    return fallback_decide(payload)
