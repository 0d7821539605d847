"""Debate and documentation phases.

Debate runs a fixed state machine::

    RESEARCH (one Researcher turn per non-empty reference group)
      -> CRITIQUE (one Critic turn over all proposals)
      -> [REVISION: Researcher revises "revise" proposals, Critic re-reviews them]  at most once
      -> DECISION (ModelPrincipal ranks surviving proposals)

so every debate transcript's speaker sequence matches
``Researcher+ Critic (Researcher Critic)? ModelPrincipal``. Documentation
drafts a blueprint and loops through the plan validator a bounded number of
times.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import InitVar, asdict, dataclass, field
from enum import Enum
from typing import Any, Collection, Mapping, Optional, Sequence

from .agents import AgentBackend, AgentRole, Phase, Transcript, query
from .corpus import CandidatePool
from .errors import (
    AllProposalsRejected,
    InvalidBlueprint,
    SchemaViolation,
    ValidationExhausted,
)
from .scoring import CATEGORY_ORDER
from .selection import ReferenceSet
from .snapshots import CodebaseSnapshot

logger = logging.getLogger(__name__)

MAX_PROPOSALS = 5
MIN_PROPOSALS = 2
DEFAULT_PLAN_ROUNDS = 3

_ROLE_LETTER = {
    AgentRole.RESEARCHER: "R",
    AgentRole.CRITIC: "C",
    AgentRole.MODEL_PRINCIPAL: "P",
}
DEBATE_PATTERN = re.compile(r"R+C(RC)?P")
NO_CRITIC_PATTERN = re.compile(r"R+P")
NO_DEBATE_PATTERN = re.compile(r"R")


def speaker_string(transcript: Transcript) -> str:
    return "".join(_ROLE_LETTER.get(r, "?") for r in transcript.speakers())


class Verdict(str, Enum):
    ADVANCE = "advance"
    REVISE = "revise"
    REJECT = "reject"


class PlanStatus(str, Enum):
    PENDING = "pending"
    APPROVED = "approved"
    REJECTED = "rejected"


@dataclass
class Proposal:
    proposal_id: str
    source_paper_ids: list[str]
    description: str
    expected_impact: str = ""
    risk_notes: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Critique:
    proposal_id: str
    verdict: Verdict
    compatibility_issues: list[str] = field(default_factory=list)
    implementation_risks: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"proposal_id": self.proposal_id, "verdict": self.verdict.value,
                "compatibility_issues": self.compatibility_issues, "implementation_risks": self.implementation_risks}


@dataclass
class RankedDecision:
    ranking: list[str]
    chosen: str
    justification: str = ""
    proposals: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.ranking or self.ranking[0] != self.chosen:
            raise ValueError("chosen proposal must head the ranking")
        if len(set(self.ranking)) != len(self.ranking):
            raise ValueError("ranking repeats a proposal")

    @property
    def chosen_proposal(self) -> Proposal:
        return self.proposals[self.chosen]


@dataclass
class ModificationStep:
    target_file: str
    change_description: str
    snippet: Optional[str] = None
    new_file: bool = False


@dataclass
class Blueprint:
    decision: RankedDecision
    modification_steps: list[ModificationStep]
    config_changes: dict = field(default_factory=dict)
    validation: PlanStatus = PlanStatus.PENDING
    validator_notes: str = ""
    revisions: int = 0
    known_files: InitVar[Optional[Collection[str]]] = None

    def __post_init__(self, known_files):
        self.validation = PlanStatus(self.validation)
        self.modification_steps = [s if isinstance(s, ModificationStep) else ModificationStep(**s)
                                   for s in self.modification_steps]
        if not self.modification_steps:
            raise InvalidBlueprint("blueprint has no modification steps")
        if known_files is not None:
            known = set(known_files)
            for step in self.modification_steps:
                if step.target_file not in known and not step.new_file:
                    raise InvalidBlueprint(f"{step.target_file} is not in the codebase and not marked new")

    @property
    def proposal(self) -> Proposal:
        return self.decision.chosen_proposal

    @property
    def target_files(self) -> list[str]:
        return list(dict.fromkeys(s.target_file for s in self.modification_steps))

    def descriptions(self) -> list[str]:
        return [s.change_description for s in self.modification_steps]

    def to_dict(self) -> dict:
        return {
            "proposal": self.proposal.to_dict(),
            "ranking": self.decision.ranking,
            "modification_steps": [asdict(s) for s in self.modification_steps],
            "config_changes": self.config_changes,
            "validation": self.validation.value,
            "validator_notes": self.validator_notes,
            "revisions": self.revisions,
        }

    def digest(self) -> str:
        body = {"steps": [asdict(s) for s in self.modification_steps], "config": self.config_changes}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


class DebateAborted(AllProposalsRejected):
    def __init__(self, message: str, transcript: Transcript):
        super().__init__(message)
        self.transcript = transcript


def _paper_context(pool: Optional[CandidatePool], pid: str) -> dict:
    if pool is None or pid not in pool:
        return {"paper_id": pid}
    rec = pool.get(pid)
    return {"paper_id": pid, "title": rec.title, "abstract": rec.abstract, "methods_text": rec.methods_text}


def _proposal_validator(allowed: set[str]):
    def check(payload: dict) -> None:
        for p in payload["proposals"]:
            bad = [pid for pid in p["source_paper_ids"] if pid not in allowed]
            if bad:
                raise SchemaViolation(f"proposal cites papers outside the reference set: {bad}")
    return check


def debate(
    refs: ReferenceSet,
    memory_context: Mapping[str, Any],
    backend: AgentBackend,
    pool: Optional[CandidatePool] = None,
    objective: str = "",
    no_debate: bool = False,
    no_critic: bool = False,
    transcript: Optional[Transcript] = None,
) -> tuple[RankedDecision, Transcript]:
    """Run the debate FSM; returns the principal's decision and the transcript.

    Raises :class:`DebateAborted` (an AllProposalsRejected) when the critic
    rejects everything; the partial transcript rides on the exception.
    """
    transcript = transcript if transcript is not None else Transcript(Phase.DEBATE)
    allowed = set(refs.paper_ids)
    check_sources = _proposal_validator(allowed)
    proposals: dict[str, Proposal] = {}

    def add(raw: dict) -> Proposal:
        pid = f"P{len(proposals) + 1}"
        p = Proposal(pid, list(raw["source_paper_ids"]), raw["description"],
                     raw.get("expected_impact", ""), raw.get("risk_notes", ""))
        proposals[pid] = p
        return p

    if no_debate:
        ctx = {"references": [_paper_context(pool, pid) for pid in refs.paper_ids], "group": "all",
               "memory": dict(memory_context), "objective": objective}
        msg = query(backend, AgentRole.RESEARCHER, transcript, ctx, validate=check_sources)
        transcript.append(msg)
        only = add(msg.payload["proposals"][0])
        return RankedDecision([only.proposal_id], only.proposal_id, "single proposal, no debate", proposals), transcript

    # RESEARCH
    groups = [(cat.value, refs.slots[cat]) for cat in CATEGORY_ORDER if refs.slots[cat]]
    if len(groups) == 1 and len(groups[0][1]) > 1:
        # a single-category set still needs two evidence groupings
        name, ids = groups[0]
        half = (len(ids) + 1) // 2
        groups = [(f"{name}1", ids[:half]), (f"{name}2", ids[half:])]
    for group, ids in groups:
        ctx = {"references": [_paper_context(pool, pid) for pid in ids], "group": group,
               "all_reference_ids": refs.paper_ids, "memory": dict(memory_context), "objective": objective}
        msg = query(backend, AgentRole.RESEARCHER, transcript, ctx, validate=check_sources)
        transcript.append(msg)
        for raw in msg.payload["proposals"]:
            if len(proposals) >= MAX_PROPOSALS:
                logger.info("dropping proposal beyond the cap of %d", MAX_PROPOSALS)
                break
            add(raw)
    if len(proposals) < min(MIN_PROPOSALS, len(refs.paper_ids)):
        raise SchemaViolation(f"research group produced {len(proposals)} proposals")

    verdicts: dict[str, Verdict] = {pid: Verdict.ADVANCE for pid in proposals}
    critiques: dict[str, Critique] = {}
    if not no_critic:
        # CRITIQUE
        _critique_round(backend, transcript, proposals, list(proposals), critiques, verdicts, final=False)
        to_revise = [pid for pid, v in verdicts.items() if v is Verdict.REVISE]
        # REVISION (single round)
        if to_revise:
            ctx = {"references": [_paper_context(pool, pid) for pid in refs.paper_ids], "group": "revision",
                   "memory": dict(memory_context), "objective": objective,
                   "revise": [dict(proposals[pid].to_dict(), critique=critiques[pid].to_dict()) for pid in to_revise]}

            def check_revision(payload, _n=len(to_revise)):
                check_sources(payload)
                if len(payload["proposals"]) < _n:
                    raise SchemaViolation("revision must return every proposal marked revise")

            msg = query(backend, AgentRole.RESEARCHER, transcript, ctx, validate=check_revision)
            transcript.append(msg)
            returned = msg.payload["proposals"]
            by_id = {r.get("proposal_id"): r for r in returned if r.get("proposal_id") in to_revise}
            for i, pid in enumerate(to_revise):
                raw = by_id.get(pid, returned[i])
                proposals[pid] = Proposal(pid, list(raw["source_paper_ids"]), raw["description"],
                                          raw.get("expected_impact", ""), raw.get("risk_notes", ""))
            _critique_round(backend, transcript, proposals, to_revise, critiques, verdicts, final=True)

    surviving = [pid for pid in proposals if verdicts[pid] is not Verdict.REJECT]
    if not surviving:
        raise DebateAborted("critic rejected every proposal", transcript)

    # DECISION
    ctx = {"proposals": [dict(proposals[pid].to_dict(),
                              critique=critiques[pid].to_dict() if pid in critiques else None)
                         for pid in surviving],
           "memory": dict(memory_context), "objective": objective}

    def check_ranking(payload):
        ranking = payload["ranking"]
        if sorted(ranking) != sorted(surviving) or len(ranking) != len(set(ranking)):
            raise SchemaViolation("ranking must be a permutation of the surviving proposals")
        if payload["chosen"] != ranking[0]:
            raise SchemaViolation("chosen proposal must be ranked first")

    msg = query(backend, AgentRole.MODEL_PRINCIPAL, transcript, ctx, validate=check_ranking)
    transcript.append(msg)
    decision = RankedDecision(list(msg.payload["ranking"]), msg.payload["chosen"],
                              msg.payload.get("justification", ""),
                              {pid: proposals[pid] for pid in surviving})
    return decision, transcript


def _critique_round(backend, transcript, proposals, ids, critiques, verdicts, final: bool) -> None:
    ctx = {"proposals": [proposals[pid].to_dict() for pid in ids], "final_round": final}

    def check(payload):
        covered = {c["proposal_id"] for c in payload["critiques"]}
        missing = set(ids) - covered
        if missing:
            raise SchemaViolation(f"critique misses proposals {sorted(missing)}")

    msg = query(backend, AgentRole.CRITIC, transcript, ctx, validate=check)
    transcript.append(msg)
    for c in msg.payload["critiques"]:
        pid = c["proposal_id"]
        if pid not in ids:
            continue
        crit = Critique(pid, Verdict(c["verdict"]), list(c.get("compatibility_issues", [])),
                        list(c.get("implementation_risks", [])))
        critiques[pid] = crit
        verdicts[pid] = crit.verdict
    if final:
        # no further revision rounds: a second "revise" advances as is
        for pid in ids:
            if verdicts[pid] is Verdict.REVISE:
                verdicts[pid] = Verdict.ADVANCE


def _blueprint_from_payload(payload: dict, decision: RankedDecision, files: Collection[str], revisions: int = 0) -> Blueprint:
    try:
        return Blueprint(decision, [ModificationStep(**{k: s[k] for k in s if k in ModificationStep.__dataclass_fields__})
                                    for s in payload["modification_steps"]],
                         dict(payload.get("config_changes", {})), revisions=revisions, known_files=files)
    except InvalidBlueprint as exc:
        raise SchemaViolation(str(exc)) from exc


def draft_blueprint(
    decision: RankedDecision,
    refs: ReferenceSet,
    codebase: CodebaseSnapshot,
    backend: AgentBackend,
    pool: Optional[CandidatePool] = None,
    transcript: Optional[Transcript] = None,
    validator_notes: str = "",
    revisions: int = 0,
) -> Blueprint:
    transcript = transcript if transcript is not None else Transcript(Phase.DOCUMENTATION)
    proposal = decision.chosen_proposal
    files = list(codebase.files)
    ctx = {"proposal": proposal.to_dict(), "files": files,
           "references": [_paper_context(pool, pid) for pid in proposal.source_paper_ids if pid in refs.paper_ids]}
    if validator_notes:
        ctx["validator_notes"] = validator_notes
    holder: dict = {}

    def check(payload):
        holder["bp"] = _blueprint_from_payload(payload, decision, files, revisions)

    msg = query(backend, AgentRole.IMPLEMENT_ARCHITECT, transcript, ctx, validate=check)
    transcript.append(msg)
    return holder["bp"]


def minimal_blueprint(decision: RankedDecision, codebase: CodebaseSnapshot) -> Blueprint:
    """One-step blueprint carrying the chosen proposal verbatim (no architect)."""
    target = sorted(codebase.files)[0] if codebase.files else "refinement_notes.txt"
    step = ModificationStep(target, decision.chosen_proposal.description, new_file=target not in codebase.files)
    return Blueprint(decision, [step], known_files=codebase.files)


def validate_plan(
    bp: Blueprint,
    backend: AgentBackend,
    refs: ReferenceSet,
    codebase: CodebaseSnapshot,
    max_rounds: int = DEFAULT_PLAN_ROUNDS,
    pool: Optional[CandidatePool] = None,
    transcript: Optional[Transcript] = None,
) -> Blueprint:
    """Validator review with up to ``max_rounds`` architect revisions.

    Returns the approved blueprint or raises ValidationExhausted carrying the
    last (rejected) blueprint.
    """
    if bp.validation is not PlanStatus.PENDING:
        raise ValueError("only pending blueprints can be validated")
    transcript = transcript if transcript is not None else Transcript(Phase.DOCUMENTATION)
    current = bp
    while True:
        msg = query(backend, AgentRole.PLAN_VALIDATOR, transcript, {"blueprint": current.to_dict()})
        transcript.append(msg)
        notes = msg.payload.get("notes", "")
        if msg.payload["verdict"] == "approve":
            current.validation = PlanStatus.APPROVED
            current.validator_notes = notes
            return current
        if current.revisions >= max_rounds:
            current.validation = PlanStatus.REJECTED
            current.validator_notes = notes
            raise ValidationExhausted(f"plan rejected after {current.revisions} revisions", current)
        current = draft_blueprint(current.decision, refs, codebase, backend, pool, transcript,
                                  validator_notes=notes or "rejected", revisions=current.revisions + 1)
