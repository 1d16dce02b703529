"""Activation scan, option construction, and the controller payload surface."""

from __future__ import annotations

import json
import random

from conftest import (
    StepHarness,
    chain_toy,
    greedy_decide,
    make_job,
    make_stage,
    toy_config,
)

PAYLOAD_KEYS = {
    "agent",
    "role",
    "kind",
    "epoch",
    "time",
    "job_id",
    "stage_index",
    "decision_factors",
    "options",
    "legal_actions",
    "observation",
    "context",
}


def collect_payloads(config, mode_id: str, seed: int = 0, decide=greedy_decide):
    h = StepHarness(config, mode_id, decide, seed=seed).run()
    return h


def test_payload_shape_and_mask_density():
    for mode in ("centralized", "hierarchical", "holonic_hybrid", "heterarchical_cnp"):
        h = collect_payloads(chain_toy(), mode)
        assert h.payloads
        for p in h.payloads:
            assert set(p) == PAYLOAD_KEYS
            assert len(p["decision_factors"]) == 3
            assert all(isinstance(line, str) for line in p["decision_factors"])
            assert p["legal_actions"] == list(range(len(p["options"])))
            assert [o["action"] for o in p["options"]] == p["legal_actions"]
            json.loads(json.dumps(p))  # JSON-complete, no exotic values


def test_payload_context_fields():
    h = collect_payloads(chain_toy(), "hierarchical")
    first = h.payloads[0]
    assert first["kind"] == "backlog_selection"
    assert first["cause" if "cause" in first else "context"]["recent_event_types"] == [
        "arrival",
        "shared_backlog_arrival",
    ]
    ctx = first["context"]
    assert set(ctx) == {
        "progress",
        "energy",
        "recent_event_types",
        "selected_due_date",
        "working_memory",
    }
    assert ctx["progress"]["completed_jobs"] == 0
    assert ctx["energy"]["rate_cap"] == 250.0
    assert ctx["working_memory"] == []
    # memory carries prior outcomes, capped at three entries
    later = h.payloads[-1]
    assert 0 < len(later["context"]["working_memory"]) <= 3


def test_backlog_candidates_are_edd_ordered_and_top_k_limited():
    jobs = [
        make_job(0, [make_stage(0, [0])], due=50.0),
        make_job(1, [make_stage(0, [0])], due=10.0),
        make_job(2, [make_stage(0, [0])], due=30.0),
        make_job(3, [make_stage(0, [0])], due=10.0),
        make_job(4, [make_stage(0, [0])], due=20.0),
    ]
    config = toy_config(jobs, top_k=3, wip_cap=1)
    h = collect_payloads(config, "centralized")
    first = next(p for p in h.payloads if p["kind"] == "backlog_selection" and len(p["options"]) > 1)
    listed = [(o["due_date"], o["job_id"]) for o in first["options"]]
    assert len(listed) == 3
    assert listed == sorted(listed)
    assert listed[0] == (10.0, 1)  # due ties break on job id


def test_chain_candidate_ordering_is_ascending():
    seen = {"cells": 0, "dispatch": 0, "areas": 0}

    def decide(payload, act):
        if payload["kind"] in ("cell_selection", "reroute", "escalation_handling"):
            ids = [o["cell_id"] for o in payload["options"]]
            assert ids == sorted(ids)
            seen["cells"] += 1
        if payload["kind"] == "area_selection":
            ids = [o["area_id"] for o in payload["options"]]
            assert ids == sorted(ids)
            seen["areas"] += 1
        if payload["kind"] == "local_dispatch":
            pairs = [(o["job_id"], o["machine_id"]) for o in payload["options"]]
            assert pairs == sorted(pairs)
            seen["dispatch"] += 1
        return greedy_decide(payload)

    collect_payloads(chain_toy(), "hierarchical", decide=decide)
    assert seen["cells"] > 0 and seen["dispatch"] > 0 and seen["areas"] > 0


def test_commitment_width_follows_authority_mode():
    widths = {}
    for mode in ("hierarchical", "holonic_hybrid", "heterarchical_cnp"):
        h = collect_payloads(chain_toy(), mode)
        commits = [p for p in h.payloads if p["kind"] == "cell_commitment"]
        assert commits
        widths[mode] = {tuple(o["decision"] for o in p["options"]) for p in commits}
    assert widths["hierarchical"] == {("accept",)}
    assert widths["holonic_hybrid"] == {("accept", "reject")}
    assert widths["heterarchical_cnp"] == {("accept", "reject")}


def test_centralized_exposes_no_commitment_or_bids():
    h = collect_payloads(chain_toy(), "centralized")
    kinds = {p["kind"] for p in h.payloads}
    assert kinds == {"backlog_selection", "cell_selection", "local_dispatch"}


def test_bid_round_activates_candidates_jointly():
    h = collect_payloads(chain_toy(), "heterarchical_cnp")
    by_epoch: dict[int, list] = {}
    for r in h.records:
        if r["kind"] == "bid_submission":
            by_epoch.setdefault(r["epoch"], []).append(r)
    assert by_epoch
    for grp in by_epoch.values():
        assert len(grp) >= 2  # every candidate answers in the same epoch
        assert len({r["agent"] for r in grp}) == len(grp)
        assert all(r["loop"] == "routing" for r in grp)


def test_observations_are_role_scoped():
    h = collect_payloads(chain_toy(), "hierarchical")
    h_cfg = h.config.hierarchy
    for p in h.payloads:
        obs = p["observation"]
        if p["role"] == "cell":
            cell = int(p["agent"].removeprefix("cell"))
            assert obs["cell_id"] == cell
            assert {m["machine_id"] for m in obs["machines"]} == set(h_cfg.machines_in(cell))
            assert "areas" not in obs
        elif p["role"] == "area":
            area = int(p["agent"].removeprefix("area"))
            assert obs["area_id"] == area
            assert [c["cell_id"] for c in obs["cells"]] == list(h_cfg.cells_in(area))
        else:
            assert p["role"] == "plant"
            assert [a["area_id"] for a in obs["areas"]] == list(h_cfg.areas)
            assert "machines" not in obs


def test_cause_attribution_separates_world_and_protocol():
    h = collect_payloads(chain_toy(), "hierarchical")
    by_kind: dict[str, set] = {}
    for r in h.records:
        by_kind.setdefault(r["kind"], set()).add(r["cause"])
    # backlog selections follow realized world events; chain steps do not
    assert "world_event" in by_kind["backlog_selection"]
    assert by_kind["area_selection"] == {"protocol_object"}
    assert by_kind["cell_selection"] == {"protocol_object"}
    assert by_kind["cell_commitment"] == {"protocol_object"}


def test_loop_tags_per_kind():
    expected = {
        "backlog_selection": "release",
        "area_selection": "routing",
        "cell_selection": "routing",
        "cell_commitment": "commitment",
        "local_dispatch": "dispatch",
        "bid_submission": "routing",
    }
    for mode in ("hierarchical", "heterarchical_cnp"):
        h = collect_payloads(chain_toy(), mode)
        for r in h.records:
            assert r["loop"] == expected[r["kind"]]


def test_setup_match_flag_reflects_machine_families():
    jobs = [
        make_job(0, [make_stage(0, [0, 1], 2.0, "F0")], due=20.0),
        make_job(1, [make_stage(0, [0, 1], 2.0, "F1")], due=40.0),
    ]
    config = toy_config(jobs, partition=(2,), wip_cap=1)
    matches = []

    def decide(payload, act):
        if payload["kind"] == "cell_selection":
            matches.append(
                {o["cell_id"]: o["summary"]["setup_match"] for o in payload["options"]}
            )
        return greedy_decide(payload)

    collect_payloads(config, "centralized", decide=decide)
    # first selection: cold machines (family None), no matches anywhere
    assert matches[0] == {0: False, 1: False}
    # second job needs F1 while cell 0 is warm on F0
    assert matches[1][0] is False


def test_fuzzed_payloads_stay_serializable_and_masked():
    for seed in range(8):
        rng = random.Random(seed)

        def decide(payload, act, rng=rng):
            data = json.loads(json.dumps(payload))
            assert data["legal_actions"] == list(range(len(data["options"])))
            return rng.choice(data["legal_actions"])

        mode = ("centralized", "hierarchical", "holonic_hybrid", "heterarchical_cnp")[seed % 4]
        h = StepHarness(chain_toy(), mode, decide, seed=seed).run()
        assert h.world.status == "done"
