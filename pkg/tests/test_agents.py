import json

import pytest

from refineloop.agents import (
    AgentRequest,
    AgentRole,
    AutoResponder,
    Message,
    Phase,
    RemoteChatClient,
    ScriptedBackend,
    Transcript,
    parse_payload,
    query,
    render_prompt,
)
from refineloop.errors import BackendUnavailable, MissingContextField, PhaseViolation, SchemaViolation

CRITIC_CTX = {"proposals": [{"proposal_id": "p1", "description": "add attention"}]}
ADVANCE = {"critiques": [{"proposal_id": "p1", "verdict": "advance"}]}


def test_query_returns_validated_message():
    t = Transcript(Phase.DEBATE)
    backend = ScriptedBackend({(AgentRole.CRITIC, 0): ADVANCE})
    msg = query(backend, AgentRole.CRITIC, t, CRITIC_CTX)
    assert msg.payload == ADVANCE and msg.speaker is AgentRole.CRITIC and msg.turn_index == 0


def test_query_reasks_once_then_succeeds():
    backend = ScriptedBackend({(AgentRole.CRITIC, 0): "sorry, no json", (AgentRole.CRITIC, 1): ADVANCE})
    msg = query(backend, AgentRole.CRITIC, Transcript(Phase.DEBATE), CRITIC_CTX)
    assert msg.payload == ADVANCE
    assert backend.log == [(AgentRole.CRITIC, 0), (AgentRole.CRITIC, 1)]


def test_query_raises_after_second_violation():
    bad = {"critiques": [{"proposal_id": "p1", "verdict": "maybe"}]}
    backend = ScriptedBackend({(AgentRole.CRITIC, 0): bad, (AgentRole.CRITIC, 1): bad})
    with pytest.raises(SchemaViolation):
        query(backend, AgentRole.CRITIC, Transcript(Phase.DEBATE), CRITIC_CTX)


def test_semantic_validator_triggers_reask():
    calls = []

    def check(payload):
        calls.append(payload)
        if len(calls) == 1:
            raise SchemaViolation("unknown proposal")

    backend = ScriptedBackend({(AgentRole.CRITIC, 0): ADVANCE, (AgentRole.CRITIC, 1): ADVANCE})
    query(backend, AgentRole.CRITIC, Transcript(Phase.DEBATE), CRITIC_CTX, validate=check)
    assert len(calls) == 2


def test_role_outside_phase_rejected():
    with pytest.raises(PhaseViolation):
        query(ScriptedBackend(), AgentRole.CODE_EXPERT, Transcript(Phase.DEBATE), {"task": "x", "blueprint": {}})
    t = Transcript(Phase.SELECTION)
    with pytest.raises(PhaseViolation):
        t.append(Message(AgentRole.CRITIC, 0, "{}"))


def test_transcript_turns_and_round_trip():
    t = Transcript(Phase.DEBATE)
    t.append(Message(AgentRole.RESEARCHER, 0, "{}", {}))
    with pytest.raises(ValueError):
        t.append(Message(AgentRole.CRITIC, 0, "{}"))
    t.append(Message(AgentRole.CRITIC, 1, "{}", {"a": 1}))
    assert Transcript.from_jsonl(t.to_jsonl()) == t


def test_render_prompt_is_deterministic_and_checks_fields():
    ctx = {"proposals": [{"id": 1}], "extra": "x"}
    assert render_prompt(AgentRole.CRITIC, ctx) == render_prompt(AgentRole.CRITIC, dict(reversed(ctx.items())))
    with pytest.raises(MissingContextField):
        render_prompt(AgentRole.CRITIC, {"proposals": []})
    with pytest.raises(MissingContextField):
        render_prompt(AgentRole.RESEARCHER, {"references": [1]})


def test_parse_payload_fenced_and_prose():
    raw = 'Here you go:\n```json\n{"verdict": "approve"}\n```'
    assert parse_payload(raw, "verdict") == {"verdict": "approve"}
    assert parse_payload('text {"verdict": "reject", "notes": "n"} end', "verdict")["verdict"] == "reject"
    with pytest.raises(SchemaViolation):
        parse_payload("[]", "verdict")


def test_scripted_backend_missing_turn_and_exceptions():
    backend = ScriptedBackend({(AgentRole.CRITIC, 0): BackendUnavailable("x")})
    req = AgentRequest(AgentRole.CRITIC, Phase.DEBATE, 0, "critique", "", "", {}, 0.0)
    with pytest.raises(BackendUnavailable):
        backend.complete(req)
    with pytest.raises(BackendUnavailable):
        backend.complete(req)


def test_scripted_backend_from_file(tmp_path):
    path = tmp_path / "script.jsonl"
    path.write_text(json.dumps({"role": "PlanValidator", "turn": 0, "response": {"verdict": "approve"}}) + "\n")
    backend = ScriptedBackend.from_file(path)
    msg = query(backend, AgentRole.PLAN_VALIDATOR, Transcript(Phase.DOCUMENTATION), {"blueprint": {"s": 1}})
    assert msg.payload == {"verdict": "approve"}


def _debate_requests():
    refs = [{"paper_id": "a", "title": "A", "methods_text": "Graph attention. More."},
            {"paper_id": "b", "title": "B", "methods_text": "Diffusion prior."}]
    props = [{"proposal_id": f"p{i}", "description": d} for i, d in enumerate(["graph attention", "diffusion"])]
    return [
        AgentRequest(AgentRole.RESEARCHER, Phase.DEBATE, 0, "proposal", "", "", {"references": refs, "group": "H"}, 0.7),
        AgentRequest(AgentRole.CRITIC, Phase.DEBATE, 1, "critique", "", "", {"proposals": props}, 0.0),
        AgentRequest(AgentRole.MODEL_PRINCIPAL, Phase.DEBATE, 2, "ranking", "", "",
                     {"proposals": props, "memory": {"best_approach": "diffusion prior"}}, 0.0),
    ]


def test_auto_responder_is_deterministic():
    a, b = AutoResponder(7), AutoResponder(7)
    for req in _debate_requests():
        assert a(req) == b(req)


def test_auto_responder_group_proposal_and_principal_preference():
    researcher, _, principal = _debate_requests()
    out = AutoResponder(0)(researcher)
    (prop,) = out["proposals"]
    assert prop["source_paper_ids"] == ["a", "b"]
    assert prop["description"] == "Adopt A: Graph attention; B: Diffusion prior."
    assert AutoResponder(0)(principal)["chosen"] == "p1"


class FakeResponse:
    def __init__(self, status, body):
        self.status_code, self._body = status, body

    def raise_for_status(self):
        import requests
        if self.status_code >= 400:
            raise requests.HTTPError(str(self.status_code))

    def json(self):
        return self._body


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.posts = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.posts.append((json, headers))
        return self.responses.pop(0)


def test_remote_chat_client(monkeypatch):
    monkeypatch.setenv("TEST_CHAT_KEY", "secret")
    session = FakeSession([FakeResponse(200, {"choices": [{"message": {"content": '{"verdict": "approve"}'}}]})])
    client = RemoteChatClient("http://x/chat", "m", "TEST_CHAT_KEY", session=session)
    msg = query(client, AgentRole.PLAN_VALIDATOR, Transcript(Phase.DOCUMENTATION), {"blueprint": {"s": 1}})
    assert msg.payload == {"verdict": "approve"}
    body, headers = session.posts[0]
    assert body["model"] == "m" and body["temperature"] == 0.0
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    assert headers["Authorization"] == "Bearer secret"


def test_remote_chat_client_gives_up(monkeypatch):
    monkeypatch.setattr("time.sleep", lambda s: None)
    client = RemoteChatClient("http://x/chat", "m", max_retries=2, session=FakeSession([FakeResponse(503, {})] * 2))
    with pytest.raises(BackendUnavailable):
        query(client, AgentRole.PLAN_VALIDATOR, Transcript(Phase.DOCUMENTATION), {"blueprint": {"s": 1}})
