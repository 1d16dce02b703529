"""Coordination layer: authority modes, contracts, and protocol bookkeeping.

An authority mode is a small switch bundle that decides which agents are
consulted on the way from backlog to machine: who routes, whether cells may
reject, who recovers from a rejection, and whether routing runs through a
mediated bid round.  Every directed protocol object (allocation, commitment,
rejection, bid, award, escalation, settlement) is appended to the world's
protocol trace; contract lifecycle transitions land in the settlement trace.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import engine
from .engine import PendingStep, WorldState

ROUTING_AUTHORITY_MODES = ("centralized", "hierarchical", "heterarchical_cnp", "holonic_hybrid")
CONTRACT_ACTION_SETS = ("accept_only", "accept_reject")
CONTRACT_STATES = ("proposed", "committed", "dispatched", "settled", "open", "rejected")

#: rejected fallback contracts allowed per stage item before it is parked
FALLBACK_RETRY_BUDGET = 3


@dataclass(frozen=True)
class AuthorityMode:
    """Switch bundle describing who holds routing and commitment authority."""

    mode_id: str
    routing_authority_mode: str
    cell_contract_actions: str
    area_local_reroute_enabled: bool = False
    plant_reroute_required: bool = False
    mediated_bid_round_enabled: bool = False

    @property
    def commitment_exposed(self) -> bool:
        """Whether cells see an explicit commitment decision.

        Plant-direct routing commits on the cell's behalf; every other
        exposure hands the proposed contract to the cell.
        """
        return self.mediated_bid_round_enabled or self.routing_authority_mode != "centralized"

    @property
    def can_reject(self) -> bool:
        return self.cell_contract_actions == "accept_reject"


@dataclass
class Contract:
    contract_id: int
    job_id: int
    stage_index: int
    cell_id: int
    state: str
    provenance: str  # direct_award | chain_assignment | bid_award | reroute | fallback
    created_at: float
    committed_at: float | None = None
    settled_at: float | None = None


_REGISTRY: dict[str, AuthorityMode] = {}


def register_authority_mode(mode: AuthorityMode) -> AuthorityMode:
    if not mode.mode_id:
        raise ValueError("mode_id must be a non-empty string")
    if mode.mode_id in _REGISTRY:
        raise ValueError(f"authority mode {mode.mode_id!r} is already registered")
    if mode.routing_authority_mode not in ROUTING_AUTHORITY_MODES:
        raise ValueError(f"unknown routing_authority_mode {mode.routing_authority_mode!r}")
    if mode.cell_contract_actions not in CONTRACT_ACTION_SETS:
        raise ValueError(f"unknown cell_contract_actions {mode.cell_contract_actions!r}")
    _REGISTRY[mode.mode_id] = mode
    return mode


def get_authority_mode(mode_id: str) -> AuthorityMode:
    try:
        return _REGISTRY[mode_id]
    except KeyError:
        raise KeyError(f"unknown authority mode {mode_id!r}; known: {', '.join(sorted(_REGISTRY))}") from None


def authority_mode_ids() -> list[str]:
    return sorted(_REGISTRY)


register_authority_mode(
    AuthorityMode(
        mode_id="centralized",
        routing_authority_mode="centralized",
        cell_contract_actions="accept_only",
    )
)
register_authority_mode(
    AuthorityMode(
        mode_id="hierarchical",
        routing_authority_mode="hierarchical",
        cell_contract_actions="accept_only",
        plant_reroute_required=True,
    )
)
register_authority_mode(
    AuthorityMode(
        mode_id="heterarchical_cnp",
        routing_authority_mode="heterarchical_cnp",
        cell_contract_actions="accept_reject",
        mediated_bid_round_enabled=True,
    )
)
register_authority_mode(
    AuthorityMode(
        mode_id="holonic_hybrid",
        routing_authority_mode="holonic_hybrid",
        cell_contract_actions="accept_reject",
        area_local_reroute_enabled=True,
    )
)


class ProtocolRuntime:
    """Per-episode protocol state: contract ids, fallback budgets, mode logic."""

    def __init__(self, mode: AuthorityMode, world: WorldState):
        self.mode = mode
        self.world = world
        self.config = world.config
        self.next_contract_id = 1
        self.fallback_contracts = 0
        self.fallback_attempts: dict[tuple[int, int], int] = {}

    # -- trace helpers ------------------------------------------------

    def _object(self, kind: str, sender: str, receiver: str, job_id: int, stage_index: int,
                contract_id: int | None = None, info: dict | None = None) -> None:
        self.world.protocol_records.append(
            {
                "time": self.world.clock,
                "kind": kind,
                "sender": sender,
                "receiver": receiver,
                "job_id": job_id,
                "stage_index": stage_index,
                "contract_id": contract_id,
                "info": info or {},
            }
        )

    def _settlement(self, contract: Contract, state: str) -> None:
        self.world.settlement_records.append(
            {
                "time": self.world.clock,
                "contract_id": contract.contract_id,
                "job_id": contract.job_id,
                "stage_index": contract.stage_index,
                "cell_id": contract.cell_id,
                "state": state,
            }
        )

    # -- contract lifecycle -------------------------------------------

    def _create_contract(self, job_id: int, cell_id: int, provenance: str, sender: str) -> Contract:
        job = self.world.jobs[job_id]
        contract = Contract(
            contract_id=self.next_contract_id,
            job_id=job_id,
            stage_index=job.stage,
            cell_id=cell_id,
            state="proposed",
            provenance=provenance,
            created_at=self.world.clock,
        )
        self.next_contract_id += 1
        self.world.contracts[contract.contract_id] = contract
        job.contract_id = contract.contract_id
        self._object("allocation", sender, f"cell{cell_id}", job_id, contract.stage_index, contract.contract_id)
        self._settlement(contract, "proposed")
        return contract

    def _commit_contract(self, contract: Contract) -> None:
        contract.state = "committed"
        contract.committed_at = self.world.clock
        self._object(
            "commitment", f"cell{contract.cell_id}", "plant", contract.job_id, contract.stage_index, contract.contract_id
        )
        self._settlement(contract, "committed")
        engine.schedule_stage_release(self.world, contract.job_id, contract.cell_id)

    def mark_dispatched(self, job_id: int) -> None:
        job = self.world.jobs[job_id]
        contract = self.world.contracts.get(job.contract_id)
        if contract is None or contract.state != "committed":
            raise engine.CorruptionError(f"job {job_id} dispatched without a committed contract")
        contract.state = "dispatched"
        self._settlement(contract, "dispatched")

    def settle_stage(self, note: dict) -> None:
        """Resolve the contract behind a completed stage item."""
        job = self.world.jobs[note["job_id"]]
        contract = self.world.contracts.get(job.contract_id)
        if contract is None or contract.state != "dispatched":
            raise engine.CorruptionError(f"job {job.job_id} finished stage without a dispatched contract")
        contract.settled_at = note["time"]
        self._settlement(contract, "settled")
        self._object(
            "settlement", f"cell{contract.cell_id}", "plant", contract.job_id, contract.stage_index, contract.contract_id
        )
        contract.state = "settled" if note["final"] else "open"
        job.contract_id = None

    # -- chain construction -------------------------------------------

    def start_item(self, job_id: int) -> None:
        """Begin the routing chain for a freshly selected backlog item."""
        world = self.world
        job = world.jobs[job_id]
        world.backlog.remove(job_id)
        world.parked.discard(job_id)
        job.in_flight = True
        if self.mode.mediated_bid_round_enabled:
            candidates = self._bid_candidates(job_id)
            world.pending_steps.append(
                PendingStep("bid_round", job_id, {"candidates": candidates, "responses": {}})
            )
        elif self.mode.routing_authority_mode == "centralized":
            world.pending_steps.append(PendingStep("cell_selection", job_id, {"scope": "plant"}))
        else:
            world.pending_steps.append(PendingStep("area_selection", job_id, {}))

    def _eligible_cells(self, job_id: int) -> list[int]:
        return list(self.world.jobs[job_id].current_stage().eligible_cells)

    def _bid_candidates(self, job_id: int) -> list[int]:
        cap = self.config.scenario.bid_candidate_cap
        cells = self._eligible_cells(job_id)
        cells.sort(key=lambda c: (self.world.cells[c].occupancy, c))
        return sorted(cells[:cap])

    def _estimated_completion(self, job_id: int, cell_id: int) -> float:
        job = self.world.jobs[job_id]
        stage = job.current_stage()
        modifier = self.config.scenario.speed_modifiers.get(cell_id, 1.0)
        queue_work = self.world.cells[cell_id].occupancy * stage.base_processing_time
        return (
            engine.transport_duration(self.config, job.location, cell_id)
            + queue_work
            + stage.base_processing_time * modifier
        )

    # -- decision handling ---------------------------------------------

    def handle_decision(self, kind: str, job_id: int, action: int, candidates: list, step: PendingStep | None) -> None:
        if kind == "backlog_selection":
            self.start_item(candidates[action])
        elif kind == "area_selection":
            self.world.pending_steps.popleft()
            area = candidates[action]
            self.world.pending_steps.appendleft(
                PendingStep("cell_selection", job_id, {"scope": "area", "area": area})
            )
        elif kind == "cell_selection":
            self.world.pending_steps.popleft()
            cell = candidates[action]
            scope = step.data.get("scope", "plant")
            provenance = "direct_award" if scope == "plant" else "chain_assignment"
            sender = "plant" if scope == "plant" else f"area{step.data.get('area')}"
            contract = self._create_contract(job_id, cell, provenance, sender)
            self._after_proposal(contract, recovery={"rejected": []})
        elif kind == "cell_commitment":
            self.world.pending_steps.popleft()
            contract = self.world.contracts[step.data["contract_id"]]
            if action == 0:
                self._commit_contract(contract)
            else:
                self._reject(contract, step)
        elif kind == "bid_submission":
            raise engine.CorruptionError("bid_submission commits through handle_bid_batch")
        elif kind == "reroute":
            self.world.pending_steps.popleft()
            cell = candidates[action]
            contract = self._create_contract(job_id, cell, "reroute", f"area{step.data['area']}")
            self._after_proposal(contract, recovery={"rejected": step.data["rejected"]})
        elif kind == "escalation_handling":
            self.world.pending_steps.popleft()
            cell = candidates[action]
            contract = self._create_contract(job_id, cell, "reroute", "plant")
            self._after_proposal(contract, recovery={"rejected": step.data["rejected"]})
        elif kind == "local_dispatch":
            job, machine = candidates[action]
            self.mark_dispatched(job)
            engine.start_dispatch(self.world, job, machine)
        else:
            raise engine.CorruptionError(f"unknown decision kind {kind!r}")

    def handle_bid_batch(self, job_id: int, step: PendingStep, responses: dict[int, int]) -> None:
        """Commit a full joint bid round and run the mediated award."""
        world = self.world
        world.pending_steps.popleft()
        willing: list[int] = []
        for cell in sorted(responses):
            action = responses[cell]
            decision = "bid" if action == 0 else "decline"
            self._object("bid", f"cell{cell}", "plant", job_id, world.jobs[job_id].stage, None, {"decision": decision})
            if action == 0:
                willing.append(cell)
        if not willing:
            self._fallback(job_id, rejected=list(step.data["candidates"]))
            return
        ranked = sorted(
            willing,
            key=lambda c: (self._estimated_completion(job_id, c), world.cells[c].occupancy, c),
        )
        self._award(job_id, ranked[0], ranked[1:], rejected=[])

    def _award(self, job_id: int, cell: int, remaining: list[int], rejected: list[int]) -> None:
        self._object("award", "plant", f"cell{cell}", job_id, self.world.jobs[job_id].stage)
        contract = self._create_contract(job_id, cell, "bid_award", "plant")
        self._after_proposal(contract, recovery={"rejected": rejected, "bid_remaining": remaining})

    def _after_proposal(self, contract: Contract, recovery: dict) -> None:
        """Expose the proposed contract to its cell, or auto-commit it."""
        if self.mode.commitment_exposed:
            data = {"contract_id": contract.contract_id}
            data.update(recovery)
            self.world.pending_steps.appendleft(PendingStep("commitment", contract.job_id, data))
        else:
            self._commit_contract(contract)

    # -- rejection recovery ---------------------------------------------

    def _reject(self, contract: Contract, step: PendingStep) -> None:
        world = self.world
        contract.state = "rejected"
        self._object(
            "rejection", f"cell{contract.cell_id}", "plant", contract.job_id, contract.stage_index, contract.contract_id
        )
        self._settlement(contract, "rejected")
        world.jobs[contract.job_id].contract_id = None
        rejected = list(step.data.get("rejected", []))
        rejected.append(contract.cell_id)
        remaining_bidders = [c for c in step.data.get("bid_remaining", []) if c not in rejected]
        if remaining_bidders:
            self._award(contract.job_id, remaining_bidders[0], remaining_bidders[1:], rejected)
            return
        if self.mode.area_local_reroute_enabled:
            area = self.config.hierarchy.area_of(contract.cell_id)
            siblings = [
                c for c in self._eligible_cells(contract.job_id)
                if self.config.hierarchy.area_of(c) == area and c not in rejected
            ]
            if siblings:
                world.pending_steps.appendleft(
                    PendingStep("reroute", contract.job_id, {"area": area, "rejected": rejected, "candidates": siblings})
                )
                return
            self._escalate(contract.job_id, area, rejected)
            return
        if self.mode.plant_reroute_required:
            area = self.config.hierarchy.area_of(contract.cell_id)
            self._escalate(contract.job_id, area, rejected)
            return
        self._fallback(contract.job_id, rejected)

    def _escalate(self, job_id: int, area: int, rejected: list[int]) -> None:
        self._object("escalation", f"area{area}", "plant", job_id, self.world.jobs[job_id].stage, None,
                     {"rejected_cells": sorted(rejected)})
        if self.mode.plant_reroute_required:
            options = [c for c in self._eligible_cells(job_id) if c not in rejected]
            if options:
                self.world.pending_steps.appendleft(
                    PendingStep("escalation", job_id, {"rejected": rejected, "candidates": options})
                )
                return
        self._fallback(job_id, rejected)

    def _fallback(self, job_id: int, rejected: list[int]) -> None:
        """Plant-side deterministic reselection, bounded by the retry budget."""
        world = self.world
        job = world.jobs[job_id]
        key = (job_id, job.stage)
        attempts = self.fallback_attempts.get(key, 0)
        if attempts >= FALLBACK_RETRY_BUDGET:
            self._park(job_id)
            return
        self.fallback_attempts[key] = attempts + 1
        candidates = [c for c in self._eligible_cells(job_id) if c not in rejected]
        if not candidates:
            candidates = self._eligible_cells(job_id)
        candidates.sort(key=lambda c: (-self._idle_machines(c), c))
        cell = candidates[0]
        self.fallback_contracts += 1
        contract = self._create_contract(job_id, cell, "fallback", "plant")
        if self.mode.commitment_exposed and self.mode.can_reject:
            self.world.pending_steps.appendleft(
                PendingStep("commitment", job_id, {"contract_id": contract.contract_id, "rejected": rejected})
            )
        else:
            self._commit_contract(contract)

    def _idle_machines(self, cell_id: int) -> int:
        return sum(
            1 for m in self.world.machines.values() if m.cell_id == cell_id and m.status == "idle"
        )

    def _park(self, job_id: int) -> None:
        """Give up on the item for now; it re-enters the backlog cooled down."""
        job = self.world.jobs[job_id]
        job.in_flight = False
        job.assigned_cell = None
        self.world.backlog.append(job_id)
        self.world.parked.add(job_id)
