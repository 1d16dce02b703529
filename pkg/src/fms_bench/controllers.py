"""Decision controllers: rule policies, external processes, model services.

Every controller answers the same way: given one decision payload, return one
action index from the legal mask.  Invalid or late answers never stall the
run; after the retry budget the decision falls back to the deterministic rule
policy and the audit records which path produced each decision.
"""

from __future__ import annotations

import hashlib
import json
import os
import queue
import random
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Any

import requests

SYSTEM_INSTRUCTION = (
    "You are one decision agent inside a factory coordination runtime. "
    "Each user message is one JSON document describing a single decision: "
    "the options list, the legal_actions mask, your local observation, and "
    "shared context. Reply with exactly one JSON object on one line, of the "
    'form {"action": N} where N is an integer from legal_actions. '
    "No prose, no code fences, no extra keys."
)

CONTROLLER_KINDS = ("rule_greedy", "rule_random_seeded", "external_process", "model_service")


class ControllerError(Exception):
    """A controller failed to produce a usable answer for one attempt."""


class ParseError(ControllerError):
    """The raw response text was not a single valid action object."""


@dataclass(frozen=True)
class ControllerBinding:
    kind: str
    name: str = ""
    command: str | None = None
    base_url: str | None = None
    model: str | None = None
    api_key: str | None = None
    timeout: float = 30.0
    retries: int = 2
    seed: int = 0

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass
class DecisionAudit:
    consulted: int = 0
    controller_decisions: int = 0
    fallback_decisions: int = 0
    fallback_contracts: int = 0
    no_action: int = 0
    first_pass_ok: int = 0

    @property
    def pass_at_1(self) -> float | None:
        if self.consulted == 0:
            return None
        return self.first_pass_ok / self.consulted

    def as_dict(self) -> dict:
        return {
            "consulted": self.consulted,
            "controller_decisions": self.controller_decisions,
            "fallback_decisions": self.fallback_decisions,
            "fallback_contracts": self.fallback_contracts,
            "no_legal_action": self.no_action,
            "first_pass_ok": self.first_pass_ok,
            "pass_at_1": self.pass_at_1,
        }


def parse_model_response(text: str, legal: list[int]) -> int:
    """Accept exactly one JSON object {"action": <legal int>}; reject the rest."""
    try:
        obj = json.loads(text.strip())
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"not a single JSON document: {exc}") from None
    if not isinstance(obj, dict):
        raise ParseError(f"expected an object, got {type(obj).__name__}")
    if "action" not in obj:
        raise ParseError("missing 'action' key")
    action = obj["action"]
    if isinstance(action, bool) or not isinstance(action, int):
        raise ParseError(f"action must be an integer, got {action!r}")
    if action not in legal:
        raise ParseError(f"action {action} outside the legal mask {legal}")
    return action


def fallback_decide(payload: dict) -> int:
    """Deterministic safe policy: commit-style kinds accept, selections take
    the least-loaded option (queued jobs, then active jobs, then index)."""
    legal = payload["legal_actions"]
    if not legal:
        raise ValueError("fallback_decide on an empty mask")
    if payload["kind"] in ("cell_commitment", "bid_submission"):
        return legal[0]
    options = {opt["action"]: opt for opt in payload["options"]}

    def load(action: int) -> tuple:
        summary = options[action].get("summary", {})
        return (summary.get("backlog_jobs", 0), summary.get("active_jobs", 0), action)

    return min(legal, key=load)


# ---------------------------------------------------------------------------
# sessions


class RuleGreedySession:
    """The fallback policy run as a first-class controller."""

    def propose(self, payload: dict) -> int:
        return fallback_decide(payload)

    def close(self) -> None:
        pass


class RuleRandomSession:
    """Uniform choice over the legal mask from a seeded stream."""

    def __init__(self, seed: int, episode_seed: int):
        digest = hashlib.sha256(f"rule_random:{seed}:{episode_seed}".encode()).digest()
        self._rng = random.Random(int.from_bytes(digest[:8], "big"))

    def propose(self, payload: dict) -> int:
        return self._rng.choice(payload["legal_actions"])

    def close(self) -> None:
        pass


class ExternalProcessSession:
    """Line-delimited JSON over a child process's stdin/stdout.

    One request line per decision, one response line expected back.  A timeout
    poisons the session: replies can no longer be matched to requests, so all
    later decisions go to the fallback instead of risking misalignment.
    """

    def __init__(self, command: str, timeout: float = 30.0):
        self._timeout = timeout
        self._dead = False
        self._proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def propose(self, payload: dict) -> int:
        if self._dead:
            raise ControllerError("controller process is gone")
        try:
            assert self._proc.stdin is not None
            self._proc.stdin.write(json.dumps(payload, separators=(",", ":")) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            self._dead = True
            raise ControllerError("controller process closed its pipe") from None
        try:
            line = self._lines.get(timeout=self._timeout)
        except queue.Empty:
            self._dead = True
            raise ControllerError("controller response timed out") from None
        if line is None:
            self._dead = True
            raise ControllerError("controller process ended its output")
        return parse_model_response(line, payload["legal_actions"])

    def close(self) -> None:
        self._dead = True
        if self._proc.poll() is None:
            try:
                if self._proc.stdin is not None:
                    self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


class ModelServiceSession:
    """Chat-completions endpoint speaking the OpenAI-compatible schema."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None, timeout: float = 30.0):
        self._url = base_url.rstrip("/") + "/chat/completions"
        self._model = model
        self._timeout = timeout
        self._http = requests.Session()
        key = api_key or os.environ.get("OPENAI_API_KEY")
        if key:
            self._http.headers["Authorization"] = f"Bearer {key}"

    def propose(self, payload: dict) -> int:
        body = {
            "model": self._model,
            "messages": [
                {"role": "system", "content": SYSTEM_INSTRUCTION},
                {"role": "user", "content": json.dumps(payload, separators=(",", ":"))},
            ],
            "temperature": 0,
            "max_tokens": 32,
        }
        try:
            resp = self._http.post(self._url, json=body, timeout=self._timeout)
            resp.raise_for_status()
            content = resp.json()["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
            raise ControllerError(f"model service call failed: {exc}") from None
        return parse_model_response(content, payload["legal_actions"])

    def close(self) -> None:
        self._http.close()


def open_session(binding: ControllerBinding, episode_seed: int) -> Any:
    if binding.kind == "rule_greedy":
        return RuleGreedySession()
    if binding.kind == "rule_random_seeded":
        return RuleRandomSession(binding.seed, episode_seed)
    if binding.kind == "external_process":
        if not binding.command:
            raise ValueError("external_process binding needs a command")
        return ExternalProcessSession(binding.command, binding.timeout)
    if binding.kind == "model_service":
        if not binding.base_url or not binding.model:
            raise ValueError("model_service binding needs base_url and model")
        return ModelServiceSession(binding.base_url, binding.model, binding.api_key, binding.timeout)
    raise ValueError(f"unknown controller kind {binding.kind!r}")


def decide(session: Any, payload: dict, audit: DecisionAudit, retries: int = 2) -> tuple[int, str, bool]:
    """Ask the controller, validating each attempt; fall back after the budget.

    Returns (action, source, first_pass) where source is "controller" or
    "fallback".
    """
    audit.consulted += 1
    legal = payload["legal_actions"]
    for attempt in range(retries + 1):
        try:
            action = session.propose(payload)
        except ControllerError:
            continue
        if action not in legal:
            continue
        audit.controller_decisions += 1
        if attempt == 0:
            audit.first_pass_ok += 1
        return action, "controller", attempt == 0
    audit.fallback_decisions += 1
    return fallback_decide(payload), "fallback", False
