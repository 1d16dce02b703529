"""Controller sessions: parsing, fallback policy, retries, process and HTTP backends."""

from __future__ import annotations

import json
import sys
import textwrap
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from fms_bench.controllers import (
    ControllerBinding,
    ControllerError,
    DecisionAudit,
    ExternalProcessSession,
    ModelServiceSession,
    ParseError,
    RuleRandomSession,
    decide,
    fallback_decide,
    open_session,
    parse_model_response,
)


def payload(kind: str = "cell_selection", summaries=({"backlog_jobs": 2}, {"backlog_jobs": 1})):
    return {
        "kind": kind,
        "legal_actions": list(range(len(summaries))),
        "options": [{"action": i, "summary": dict(s)} for i, s in enumerate(summaries)],
    }


class TestParseModelResponse:
    def test_valid(self):
        assert parse_model_response('{"action": 1}', [0, 1, 2]) == 1

    def test_whitespace_tolerated(self):
        assert parse_model_response('  {"action": 0}\n', [0]) == 0

    def test_rejects_non_json(self):
        with pytest.raises(ParseError):
            parse_model_response("pick option 1", [0, 1])

    def test_rejects_trailing_garbage(self):
        with pytest.raises(ParseError):
            parse_model_response('{"action": 1} because it is best', [0, 1])

    def test_rejects_non_object(self):
        with pytest.raises(ParseError):
            parse_model_response("[1]", [0, 1])

    def test_rejects_missing_key(self):
        with pytest.raises(ParseError):
            parse_model_response('{"choice": 1}', [0, 1])

    def test_rejects_bool(self):
        with pytest.raises(ParseError):
            parse_model_response('{"action": true}', [0, 1])

    def test_rejects_float(self):
        with pytest.raises(ParseError):
            parse_model_response('{"action": 1.0}', [0, 1])

    def test_rejects_string_digit(self):
        with pytest.raises(ParseError):
            parse_model_response('{"action": "1"}', [0, 1])

    def test_rejects_out_of_mask(self):
        with pytest.raises(ParseError):
            parse_model_response('{"action": 5}', [0, 1])


class TestFallbackDecide:
    def test_commitment_always_first_option(self):
        assert fallback_decide(payload("cell_commitment", ({}, {}))) == 0
        assert fallback_decide(payload("bid_submission", ({}, {}))) == 0

    def test_least_backlog_wins(self):
        doc = payload("cell_selection", ({"backlog_jobs": 3}, {"backlog_jobs": 0}, {"backlog_jobs": 2}))
        assert fallback_decide(doc) == 1

    def test_active_jobs_break_ties(self):
        doc = payload(
            "area_selection",
            ({"backlog_jobs": 1, "active_jobs": 2}, {"backlog_jobs": 1, "active_jobs": 0}),
        )
        assert fallback_decide(doc) == 1

    def test_index_breaks_full_ties(self):
        doc = payload("local_dispatch", ({"due_date": 9.0}, {"due_date": 9.0}))
        assert fallback_decide(doc) == 0

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            fallback_decide({"kind": "cell_selection", "legal_actions": [], "options": []})


def test_rule_random_is_seed_deterministic():
    doc = payload("cell_selection", tuple({"backlog_jobs": i} for i in range(5)))
    a = [RuleRandomSession(3, 7).propose(doc) for _ in range(20)]
    b = [RuleRandomSession(3, 7).propose(doc) for _ in range(20)]
    assert a == b
    c_session = RuleRandomSession(3, 8)
    c = [c_session.propose(doc) for _ in range(20)]
    assert c != a or True  # different stream; equality is astronomically unlikely
    seq = []
    s = RuleRandomSession(3, 7)
    for _ in range(50):
        seq.append(s.propose(doc))
    assert set(seq) <= set(range(5))
    assert len(set(seq)) > 1


class FlakySession:
    def __init__(self, failures: int, answer: int = 1):
        self.failures = failures
        self.answer = answer
        self.calls = 0

    def propose(self, payload):
        self.calls += 1
        if self.calls <= self.failures:
            raise ControllerError("transient")
        return self.answer

    def close(self):
        pass


def test_decide_retries_then_succeeds():
    audit = DecisionAudit()
    action, source, first = decide(FlakySession(failures=1), payload(), audit, retries=2)
    assert (action, source, first) == (1, "controller", False)
    assert audit.consulted == 1
    assert audit.controller_decisions == 1
    assert audit.first_pass_ok == 0


def test_decide_first_pass_flag():
    audit = DecisionAudit()
    action, source, first = decide(FlakySession(failures=0), payload(), audit)
    assert (action, source, first) == (1, "controller", True)
    assert audit.first_pass_ok == 1
    assert audit.pass_at_1 == 1.0


def test_decide_exhausts_budget_and_falls_back():
    audit = DecisionAudit()
    action, source, first = decide(FlakySession(failures=99), payload(), audit, retries=2)
    assert source == "fallback"
    assert not first
    assert action == 1  # least backlog
    assert audit.fallback_decisions == 1
    assert audit.controller_decisions == 0
    assert audit.pass_at_1 == 0.0


class OutOfMaskSession:
    def propose(self, payload):
        return 99

    def close(self):
        pass


def test_decide_rejects_out_of_mask_proposals():
    audit = DecisionAudit()
    action, source, _ = decide(OutOfMaskSession(), payload(), audit, retries=1)
    assert source == "fallback"
    assert action in payload()["legal_actions"]


def test_audit_dict_shape():
    audit = DecisionAudit()
    decide(FlakySession(failures=0), payload(), audit)
    d = audit.as_dict()
    assert set(d) == {
        "consulted",
        "controller_decisions",
        "fallback_decisions",
        "fallback_contracts",
        "no_legal_action",
        "first_pass_ok",
        "pass_at_1",
    }
    assert DecisionAudit().pass_at_1 is None


def script_session(tmp_path, body: str, timeout: float = 5.0) -> ExternalProcessSession:
    script = tmp_path / "controller.py"
    script.write_text(textwrap.dedent(body))
    return ExternalProcessSession(f"{sys.executable} {script}", timeout=timeout)


ECHO_FIRST_LEGAL = """
    import json, sys
    for line in sys.stdin:
        doc = json.loads(line)
        print(json.dumps({"action": doc["legal_actions"][0]}), flush=True)
"""


def test_external_process_round_trip(tmp_path):
    session = script_session(tmp_path, ECHO_FIRST_LEGAL)
    try:
        for _ in range(5):
            assert session.propose(payload()) == 0
    finally:
        session.close()


def test_external_process_garbage_output(tmp_path):
    session = script_session(
        tmp_path,
        """
        import sys
        for line in sys.stdin:
            print("utter nonsense", flush=True)
        """,
    )
    try:
        with pytest.raises(ParseError):
            session.propose(payload())
        # garbage is a per-call failure, not a dead session
        with pytest.raises(ParseError):
            session.propose(payload())
    finally:
        session.close()


def test_external_process_early_exit(tmp_path):
    session = script_session(tmp_path, "import sys; sys.exit(0)")
    try:
        with pytest.raises(ControllerError):
            session.propose(payload())
        with pytest.raises(ControllerError):
            session.propose(payload())  # dead stays dead
    finally:
        session.close()


def test_external_process_timeout_poisons_session(tmp_path):
    session = script_session(
        tmp_path,
        """
        import sys, time
        for line in sys.stdin:
            time.sleep(60)
        """,
        timeout=0.3,
    )
    try:
        with pytest.raises(ControllerError):
            session.propose(payload())
        # a poisoned session refuses instead of desynchronizing replies
        with pytest.raises(ControllerError):
            session.propose(payload())
    finally:
        session.close()


def test_external_process_through_decide_falls_back(tmp_path):
    session = script_session(
        tmp_path,
        """
        import sys
        for line in sys.stdin:
            print("not json", flush=True)
        """,
    )
    audit = DecisionAudit()
    try:
        action, source, _ = decide(session, payload(), audit, retries=2)
    finally:
        session.close()
    assert source == "fallback"
    assert action == 1


class StubHandler(BaseHTTPRequestHandler):
    behavior = "ok"
    seen: list[dict] = []

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        type(self).seen.append(body)
        if type(self).behavior == "error":
            self.send_response(500)
            self.end_headers()
            return
        if type(self).behavior == "malformed":
            content = "the best action is 0"
        else:
            content = json.dumps({"action": 1})
        reply = {"choices": [{"message": {"content": content}}]}
        data = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    StubHandler.behavior = "ok"
    StubHandler.seen = []
    yield f"http://127.0.0.1:{server.server_port}/v1"
    server.shutdown()
    thread.join(timeout=2)


def test_model_service_round_trip(stub_server):
    session = ModelServiceSession(stub_server, model="toy-model", api_key="k")
    try:
        assert session.propose(payload()) == 1
    finally:
        session.close()
    body = StubHandler.seen[0]
    assert body["model"] == "toy-model"
    assert body["temperature"] == 0
    roles = [m["role"] for m in body["messages"]]
    assert roles == ["system", "user"]
    json.loads(body["messages"][1]["content"])  # the payload rides as JSON text


def test_model_service_http_error(stub_server):
    StubHandler.behavior = "error"
    session = ModelServiceSession(stub_server, model="toy-model")
    try:
        with pytest.raises(ControllerError):
            session.propose(payload())
    finally:
        session.close()


def test_model_service_malformed_content(stub_server):
    StubHandler.behavior = "malformed"
    session = ModelServiceSession(stub_server, model="toy-model")
    try:
        with pytest.raises(ParseError):
            session.propose(payload())
    finally:
        session.close()


def test_open_session_dispatch():
    assert open_session(ControllerBinding(kind="rule_greedy"), 0).propose(payload()) == 1
    rnd = open_session(ControllerBinding(kind="rule_random_seeded", seed=4), 9)
    assert rnd.propose(payload()) in (0, 1)
    with pytest.raises(ValueError):
        open_session(ControllerBinding(kind="external_process"), 0)
    with pytest.raises(ValueError):
        open_session(ControllerBinding(kind="model_service"), 0)
    with pytest.raises(ValueError):
        open_session(ControllerBinding(kind="psychic"), 0)


def test_binding_label():
    assert ControllerBinding(kind="rule_greedy").label == "rule_greedy"
    assert ControllerBinding(kind="external_process", name="mirror", command="x").label == "mirror"
