"""Role-specialized agents behind a uniform query interface.

Every agent answers with a JSON payload validated against a named schema.
Backends only turn an :class:`AgentRequest` into raw text; parsing,
validation and the single re-ask live in :func:`query`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Protocol

import jsonschema
import requests

from .errors import BackendUnavailable, MissingContextField, PhaseViolation, SchemaViolation

logger = logging.getLogger(__name__)


class AgentRole(str, Enum):
    REF_EVALUATOR = "RefEvaluator"
    RESEARCHER = "Researcher"
    CRITIC = "Critic"
    MODEL_PRINCIPAL = "ModelPrincipal"
    IMPLEMENT_ARCHITECT = "ImplementArchitect"
    PLAN_VALIDATOR = "PlanValidator"
    CODE_EXPERT = "CodeExpert"
    CODE_VALIDATOR = "CodeValidator"


class Phase(str, Enum):
    SELECTION = "Selection"
    DEBATE = "Debate"
    DOCUMENTATION = "Documentation"
    EXECUTION = "Execution"


PHASE_ROLES = {
    Phase.SELECTION: {AgentRole.REF_EVALUATOR},
    Phase.DEBATE: {AgentRole.RESEARCHER, AgentRole.CRITIC, AgentRole.MODEL_PRINCIPAL},
    Phase.DOCUMENTATION: {AgentRole.IMPLEMENT_ARCHITECT, AgentRole.PLAN_VALIDATOR},
    Phase.EXECUTION: {AgentRole.CODE_EXPERT, AgentRole.CODE_VALIDATOR},
}


@dataclass(frozen=True)
class Message:
    speaker: AgentRole
    turn_index: int
    content: str
    payload: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"speaker": self.speaker.value, "turn_index": self.turn_index,
                "content": self.content, "payload": self.payload}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Message":
        return cls(AgentRole(data["speaker"]), int(data["turn_index"]), data["content"], data.get("payload"))


@dataclass
class Transcript:
    phase: Phase
    messages: list[Message] = field(default_factory=list)

    def __post_init__(self):
        self.phase = Phase(self.phase)

    @property
    def next_turn(self) -> int:
        return self.messages[-1].turn_index + 1 if self.messages else 0

    def append(self, msg: Message) -> None:
        if msg.speaker not in PHASE_ROLES[self.phase]:
            raise PhaseViolation(f"{msg.speaker.value} cannot speak in {self.phase.value}")
        if self.messages and msg.turn_index <= self.messages[-1].turn_index:
            raise ValueError("turn_index must be strictly increasing")
        self.messages.append(msg)

    def speakers(self) -> list[AgentRole]:
        return [m.speaker for m in self.messages]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"phase": self.phase.value}, sort_keys=True)]
        lines += [json.dumps(m.to_dict(), sort_keys=True) for m in self.messages]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Transcript":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        t = cls(Phase(rows[0]["phase"]))
        for row in rows[1:]:
            t.append(Message.from_dict(row))
        return t


_STR_LIST = {"type": "array", "items": {"type": "string"}}

SCHEMAS: dict[str, dict] = {
    "evaluation": {
        "type": "object",
        "required": ["rankings"],
        "properties": {
            "rankings": {"type": "object", "additionalProperties": _STR_LIST},
            "rationale": {"type": "object", "additionalProperties": {"type": "string"}},
        },
    },
    "proposal": {
        "type": "object",
        "required": ["proposals"],
        "properties": {
            "proposals": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["source_paper_ids", "description"],
                    "properties": {
                        "proposal_id": {"type": "string"},
                        "source_paper_ids": {**_STR_LIST, "minItems": 1},
                        "description": {"type": "string", "minLength": 1},
                        "expected_impact": {"type": "string"},
                        "risk_notes": {"type": "string"},
                    },
                },
            }
        },
    },
    "critique": {
        "type": "object",
        "required": ["critiques"],
        "properties": {
            "critiques": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["proposal_id", "verdict"],
                    "properties": {
                        "proposal_id": {"type": "string"},
                        "compatibility_issues": _STR_LIST,
                        "implementation_risks": _STR_LIST,
                        "verdict": {"enum": ["advance", "revise", "reject"]},
                    },
                },
            }
        },
    },
    "ranking": {
        "type": "object",
        "required": ["ranking", "chosen"],
        "properties": {
            "ranking": {**_STR_LIST, "minItems": 1},
            "chosen": {"type": "string"},
            "justification": {"type": "string"},
        },
    },
    "blueprint": {
        "type": "object",
        "required": ["modification_steps"],
        "properties": {
            "modification_steps": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["target_file", "change_description"],
                    "properties": {
                        "target_file": {"type": "string", "minLength": 1},
                        "change_description": {"type": "string"},
                        "snippet": {"type": ["string", "null"]},
                        "new_file": {"type": "boolean"},
                    },
                },
            },
            "config_changes": {"type": "object"},
        },
    },
    "verdict": {
        "type": "object",
        "required": ["verdict"],
        "properties": {"verdict": {"enum": ["approve", "reject"]}, "notes": {"type": "string"}},
    },
    "code": {
        "type": "object",
        "required": ["files"],
        "properties": {
            "files": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["path", "content"],
                    "properties": {"path": {"type": "string"}, "content": {"type": "string"}},
                },
            }
        },
    },
    "audit": {
        "type": "object",
        "required": ["verdict"],
        "properties": {
            "verdict": {"enum": ["pass", "fail"]},
            "findings": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["path", "description"],
                    "properties": {"path": {"type": "string"}, "description": {"type": "string"}},
                },
            },
        },
    },
    "rebuttal": {
        "type": "object",
        "required": ["rebut"],
        "properties": {"rebut": {"type": "boolean"}, "arguments": {"type": "string"}},
    },
}


ROLE_BRIEFS = {
    AgentRole.REF_EVALUATOR: "You review candidate reference papers for a model refinement task. "
    "Judge each paper's Methods section for logical feasibility and rank the candidates within each domain category.",
    AgentRole.RESEARCHER: "You are a member of the research group. Propose architectural modifications "
    "to the target model, each grounded in the given reference papers.",
    AgentRole.CRITIC: "You review modification proposals for compatibility with the target codebase and "
    "implementation risk. Give each proposal a verdict: advance, revise or reject.",
    AgentRole.MODEL_PRINCIPAL: "You rank the surviving proposals by expected performance impact and feasibility "
    "and choose one to implement.",
    AgentRole.IMPLEMENT_ARCHITECT: "You turn the chosen proposal into a file-level implementation blueprint "
    "for the target codebase.",
    AgentRole.PLAN_VALIDATOR: "You check a blueprint for feasibility before it is dispatched. Approve or reject with notes.",
    AgentRole.CODE_EXPERT: "You implement blueprints in the codebase and may contest validator findings you believe are wrong.",
    AgentRole.CODE_VALIDATOR: "You audit modified code for syntactic and configuration integrity.",
}

REQUIRED_CONTEXT = {
    AgentRole.REF_EVALUATOR: ("papers", "quotas"),
    AgentRole.RESEARCHER: ("references", "group"),
    AgentRole.CRITIC: ("proposals",),
    AgentRole.MODEL_PRINCIPAL: ("proposals",),
    AgentRole.IMPLEMENT_ARCHITECT: ("proposal", "files"),
    AgentRole.PLAN_VALIDATOR: ("blueprint",),
    AgentRole.CODE_EXPERT: ("task", "blueprint"),
    AgentRole.CODE_VALIDATOR: ("blueprint", "changes"),
}

ROLE_SCHEMA = {
    AgentRole.REF_EVALUATOR: "evaluation",
    AgentRole.RESEARCHER: "proposal",
    AgentRole.CRITIC: "critique",
    AgentRole.MODEL_PRINCIPAL: "ranking",
    AgentRole.IMPLEMENT_ARCHITECT: "blueprint",
    AgentRole.PLAN_VALIDATOR: "verdict",
    AgentRole.CODE_VALIDATOR: "audit",
}

# 0 where a judgment gates the pipeline
DEFAULT_TEMPERATURES = {
    AgentRole.REF_EVALUATOR: 0.0,
    AgentRole.RESEARCHER: 0.7,
    AgentRole.CRITIC: 0.0,
    AgentRole.MODEL_PRINCIPAL: 0.0,
    AgentRole.IMPLEMENT_ARCHITECT: 0.2,
    AgentRole.PLAN_VALIDATOR: 0.0,
    AgentRole.CODE_EXPERT: 0.2,
    AgentRole.CODE_VALIDATOR: 0.0,
}


def render_prompt(role: AgentRole, context: Mapping[str, Any]) -> str:
    """Deterministic user prompt for ``role``; raises MissingContextField on absent or empty fields."""
    role = AgentRole(role)
    for name in REQUIRED_CONTEXT[role]:
        value = context.get(name)
        if value is None or (hasattr(value, "__len__") and len(value) == 0):
            raise MissingContextField(f"{role.value} prompt requires non-empty '{name}'")
    lines = [f"## Role: {role.value}", ROLE_BRIEFS[role], "", "## Context"]
    for key in sorted(context):
        lines.append(f"### {key}")
        lines.append(json.dumps(context[key], sort_keys=True, indent=2, default=str))
    return "\n".join(lines)


def schema_instructions(schema_name: str) -> str:
    return ("Respond with a single JSON object (no prose) matching this JSON schema:\n"
            + json.dumps(SCHEMAS[schema_name], sort_keys=True))


@dataclass(frozen=True)
class AgentRequest:
    role: AgentRole
    phase: Phase
    turn_index: int
    schema: str
    system: str
    prompt: str
    context: Mapping[str, Any]
    temperature: float
    attempt: int = 0


class AgentBackend(Protocol):
    backend_id: str

    def complete(self, request: AgentRequest) -> str: ...


_FENCE_RE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)


def parse_payload(raw: str, schema_name: str) -> dict:
    """Extract a JSON object from ``raw`` (bare or fenced) and validate it."""
    candidates = []
    stripped = raw.strip()
    if stripped.startswith("{"):
        candidates.append(stripped)
    candidates += _FENCE_RE.findall(raw)
    start, end = raw.find("{"), raw.rfind("}")
    if 0 <= start < end:
        candidates.append(raw[start : end + 1])
    last_error = "no JSON object found"
    for cand in candidates:
        try:
            payload = json.loads(cand)
        except json.JSONDecodeError as exc:
            last_error = str(exc)
            continue
        try:
            jsonschema.validate(payload, SCHEMAS[schema_name])
        except jsonschema.ValidationError as exc:
            last_error = exc.message
            continue
        return payload
    raise SchemaViolation(f"response does not match '{schema_name}': {last_error}")


def query(
    backend: AgentBackend,
    role: AgentRole,
    transcript: Transcript,
    context: Mapping[str, Any],
    schema: Optional[str] = None,
    temperature: Optional[float] = None,
    reask: int = 1,
    validate: Optional[Callable[[dict], None]] = None,
) -> Message:
    """Ask ``role`` for a schema-conforming answer; the caller appends the result.

    ``validate`` may raise SchemaViolation for semantic problems (unknown ids,
    missing coverage); those trigger the same single re-ask.
    """
    role = AgentRole(role)
    if role not in PHASE_ROLES[transcript.phase]:
        raise PhaseViolation(f"{role.value} is not admitted in phase {transcript.phase.value}")
    schema = schema or ROLE_SCHEMA[role]
    prompt = render_prompt(role, context)
    system = ROLE_BRIEFS[role] + "\n" + schema_instructions(schema)
    temp = DEFAULT_TEMPERATURES[role] if temperature is None else temperature
    error: Optional[SchemaViolation] = None
    for attempt in range(reask + 1):
        user = prompt if error is None else f"{prompt}\n\nYour previous answer was invalid ({error}). Answer again."
        req = AgentRequest(role, transcript.phase, transcript.next_turn, schema, system, user, context, temp, attempt)
        raw = backend.complete(req)
        try:
            payload = parse_payload(raw, schema)
            if validate is not None:
                validate(payload)
        except SchemaViolation as exc:
            logger.info("%s answered off-schema (attempt %d): %s", role.value, attempt + 1, exc)
            error = exc
            continue
        return Message(role, transcript.next_turn, raw, payload)
    raise error


class ScriptedBackend:
    """Replays responses keyed by (role, per-role turn number).

    A response may be a dict (sent as JSON), a string (sent verbatim) or an
    exception (raised). Keys missing from the script go to ``fallback`` if
    given, otherwise the backend reports itself unavailable.
    """

    backend_id = "scripted"

    def __init__(self, script: Optional[Mapping] = None, fallback: Optional[Callable[[AgentRequest], Any]] = None):
        self.script = {(AgentRole(r), int(t)): v for (r, t), v in (script or {}).items()}
        self.fallback = fallback
        self._turns: dict[AgentRole, int] = {}
        self._lock = threading.Lock()
        self.log: list[tuple[AgentRole, int]] = []

    @classmethod
    def from_file(cls, path: Path, fallback=None) -> "ScriptedBackend":
        """Load a JSON-lines script: one ``{"role", "turn", "response"}`` object per line."""
        script = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                script[(row["role"], row["turn"])] = row["response"]
        return cls(script, fallback)

    def complete(self, request: AgentRequest) -> str:
        with self._lock:
            turn = self._turns.get(request.role, 0)
            self._turns[request.role] = turn + 1
            self.log.append((request.role, turn))
        key = (request.role, turn)
        if key in self.script:
            response = self.script[key]
        elif self.fallback is not None:
            response = self.fallback(request)
        else:
            raise BackendUnavailable(f"script has no response for {request.role.value} turn {turn}")
        if isinstance(response, BaseException) or (isinstance(response, type) and issubclass(response, BaseException)):
            raise response
        if isinstance(response, str):
            return response
        return json.dumps(response, sort_keys=True)


class RemoteChatClient:
    """Minimal chat-completions client (system + user messages).

    Posts ``{"model", "messages", "temperature", "max_tokens"}`` and reads
    ``choices[0].message.content``. The bearer token is read from the
    environment variable ``api_key_env``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "REFINELOOP_CHAT_API_KEY",
        timeout: float = 120.0,
        max_retries: int = 3,
        max_tokens: int = 4096,
        temperatures: Optional[Mapping[AgentRole, float]] = None,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.max_tokens = max_tokens
        self.temperatures = {AgentRole(k): float(v) for k, v in (temperatures or {}).items()}
        self.backend_id = f"chat-{model}"
        self._session = session or requests.Session()

    def build_body(self, request: AgentRequest) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.prompt},
            ],
            "temperature": self.temperatures.get(request.role, request.temperature),
            "max_tokens": self.max_tokens,
        }

    def complete(self, request: AgentRequest) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = self.build_body(request)
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries):
            try:
                resp = self._session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
                last_error = exc
                logger.warning("chat request failed (attempt %d/%d): %s", attempt + 1, self.max_retries, exc)
                if attempt + 1 < self.max_retries:
                    time.sleep(min(2.0 ** attempt, 10.0))
        raise BackendUnavailable(f"chat endpoint {self.endpoint} unavailable: {last_error}")


def _tokens(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", text.lower()))


def _overlap(a: set[str], b: set[str]) -> float:
    return len(a & b) / len(a | b) if a and b else 0.0


def _first_sentence(text: str, limit: int = 200) -> str:
    s = text.strip().split(". ")[0]
    return s[:limit]


class AutoResponder:
    """Rule-based stand-in for every role, for fully offline runs.

    Answers are derived from the request context: the evaluator keeps score
    order, each research group proposes one modification combining the
    titles and methods of its papers, the principal favours proposals that
    resemble the best approach so far (seeded shuffle otherwise),
    validators approve, and the code expert appends each change description
    to the blueprint's target file. Output depends only on (seed, role,
    per-role turn, context).
    """

    def __init__(self, seed: int = 0, critic_reject_rate: float = 0.0, critic_revise_rate: float = 0.0):
        self.seed = seed
        self.critic_reject_rate = critic_reject_rate
        self.critic_revise_rate = critic_revise_rate
        self._turns: dict[AgentRole, int] = {}
        self._lock = threading.Lock()

    def _rng(self, role: AgentRole) -> random.Random:
        with self._lock:
            turn = self._turns.get(role, 0)
            self._turns[role] = turn + 1
        h = hashlib.sha256(f"{self.seed}:{role.value}:{turn}".encode()).digest()
        return random.Random(int.from_bytes(h[:8], "little"))

    def __call__(self, request: AgentRequest) -> dict:
        ctx = request.context
        rng = self._rng(request.role)
        role = request.role
        if role is AgentRole.REF_EVALUATOR:
            rankings: dict[str, list[str]] = {}
            for p in ctx["papers"]:
                rankings.setdefault(p["category"], []).append(p["paper_id"])
            return {"rankings": rankings,
                    "rationale": {p["paper_id"]: "methods judged feasible" for p in ctx["papers"]}}
        if role is AgentRole.RESEARCHER:
            if ctx.get("revise"):
                return {"proposals": [dict(p, description=p["description"] + " (revised for compatibility)")
                                      for p in ctx["revise"]]}
            refs = ctx["references"]
            parts = [f"{ref['title']}: {_first_sentence(ref.get('methods_text', ''))}" for ref in refs]
            return {"proposals": [{
                "source_paper_ids": [ref["paper_id"] for ref in refs],
                "description": "Adopt " + "; ".join(parts),
                "expected_impact": f"improves {ctx.get('objective', 'the objective')}",
                "risk_notes": "moderate integration effort",
            }]}
        if role is AgentRole.CRITIC:
            critiques = []
            for p in ctx["proposals"]:
                u = rng.random()
                verdict = "advance"
                if u < self.critic_reject_rate:
                    verdict = "reject"
                elif u < self.critic_reject_rate + self.critic_revise_rate and not ctx.get("final_round"):
                    verdict = "revise"
                critiques.append({"proposal_id": p["proposal_id"], "verdict": verdict,
                                  "compatibility_issues": [], "implementation_risks": ["tensor shape alignment"]})
            return {"critiques": critiques}
        if role is AgentRole.MODEL_PRINCIPAL:
            # prefer proposals resembling the approach behind the current best; shuffle breaks ties
            best = _tokens(ctx.get("memory", {}).get("best_approach", ""))
            props = list(ctx["proposals"])
            rng.shuffle(props)
            props.sort(key=lambda p: -_overlap(_tokens(p["description"]), best))
            ids = [p["proposal_id"] for p in props]
            return {"ranking": ids, "chosen": ids[0], "justification": "highest expected impact"}
        if role is AgentRole.IMPLEMENT_ARCHITECT:
            target = sorted(ctx["files"])[0]
            return {"modification_steps": [{"target_file": target,
                                            "change_description": ctx["proposal"]["description"],
                                            "snippet": None}],
                    "config_changes": {}}
        if role is AgentRole.PLAN_VALIDATOR:
            return {"verdict": "approve", "notes": "feasible"}
        if role is AgentRole.CODE_EXPERT:
            if ctx["task"] == "rebut":
                return {"rebut": False, "arguments": ""}
            current = dict(ctx.get("files", {}))
            for step in ctx["blueprint"]["modification_steps"]:
                path = step["target_file"]
                current[path] = current.get(path, "") + f"\n# change: {step['change_description']}\n"
            touched = sorted({s["target_file"] for s in ctx["blueprint"]["modification_steps"]})
            return {"files": [{"path": p, "content": current[p]} for p in touched]}
        if role is AgentRole.CODE_VALIDATOR:
            return {"verdict": "pass", "findings": []}
        raise ValueError(f"unhandled role {role}")
