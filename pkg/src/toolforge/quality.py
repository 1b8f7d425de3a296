"""Quality assurance: in-flight self-reflection, post-hoc consensus voting,
rejection pruning, and the hallucination ledger."""

from __future__ import annotations

import json
import logging
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .backend import Backend, ChatRequest, Message
from .schema import ParseReport, ToolSpec, validate_against
from .trajectory import QAInfo, Trajectory, Turn, lint_turns

logger = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 3
DECISIONS = ("accept", "reject", "revise")


def load_style_policy(path: str | Path | None = None) -> dict[str, Any]:
    if path is None:
        text = resources.files("toolforge").joinpath("data/style_policy.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    policy = json.loads(text)
    if "version" not in policy:
        raise ValueError("style policy must carry a version")
    return policy


# ---------------------------------------------------------------------------
# Self-reflection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintViolation:
    tag: str  # style | schema
    message: str

    def to_json(self) -> dict[str, str]:
        return {"tag": self.tag, "message": self.message}


@dataclass(frozen=True)
class RoleConstraints:
    """What a turn must satisfy beyond its own syntax.

    ``unknown_fields`` are the scenario's unknown_info names; ``resolved``
    maps those already supplied by tool results to their values.
    ``bindings`` maps ``(tool, argument)`` to the unknown field that must
    feed it. ``forbidden_values`` are values the user must not state.
    """

    role: str
    unknown_fields: tuple[str, ...] = ()
    resolved: Mapping[str, Any] = field(default_factory=dict)
    bindings: Mapping[tuple[str, str], str] = field(default_factory=dict)
    forbidden_values: Mapping[str, Any] = field(default_factory=dict)
    policy: Mapping[str, Any] | None = None


@dataclass
class ReflectionOutcome:
    original: Turn
    corrected: Turn
    violations: list[ConstraintViolation]
    attempts: int
    resolved: bool
    history: list[list[ConstraintViolation]] = field(default_factory=list)

    @property
    def hallucinated(self) -> bool:
        return bool(self.violations)


Corrector = Callable[[Turn, list[ConstraintViolation], int], "Turn | tuple[Turn, ParseReport | None]"]

_policy_cache: dict[str, Any] | None = None


def _default_policy() -> Mapping[str, Any]:
    global _policy_cache
    if _policy_cache is None:
        _policy_cache = load_style_policy()
    return _policy_cache


def _field_words(name: str) -> str:
    return re.escape(name.replace("_", " ")).replace(r"\ ", r"[\s_]+")


def check_turn(
    turn: Turn,
    constraints: RoleConstraints,
    tools: Mapping[str, ToolSpec],
    parse_report: ParseReport | None = None,
) -> list[ConstraintViolation]:
    """Run the style and schema checkers for the turn's role."""
    policy = constraints.policy or _default_policy()
    out: list[ConstraintViolation] = []
    if turn.role == "user":
        rules = policy.get("user", {})
        text = turn.content
        if len(text.strip()) < rules.get("min_chars", 1):
            out.append(ConstraintViolation("style", "empty user message"))
        if len(text) > rules.get("max_chars", 10**9):
            out.append(ConstraintViolation("style", "user message too long"))
        for pat in rules.get("forbid_patterns", []):
            if re.search(pat, text):
                out.append(ConstraintViolation("style", f"user message contains tool syntax ({pat})"))
        if turn.tool_calls:
            out.append(ConstraintViolation("style", "user turn carries tool calls"))
        for name, value in constraints.forbidden_values.items():
            if name in constraints.resolved:
                continue
            if len(str(value)) >= 2 and str(value) in text:
                out.append(ConstraintViolation("style", f"user states {name} before it is known"))
        if rules.get("forbid_invented_unknowns", True):
            for name in constraints.unknown_fields:
                if name in constraints.resolved:
                    continue
                if re.search(rf"\b{_field_words(name)}\s*(?:is|=|:|of)\s*\$?\d", text, re.IGNORECASE):
                    out.append(ConstraintViolation("style", f"user invents a value for {name}"))
        return out

    if turn.role == "assistant":
        rules = policy.get("assistant", {})
        if parse_report is not None:
            if not parse_report.tags_balanced:
                out.append(ConstraintViolation("style", "malformed <think>/<tool_call> tags"))
            if parse_report.invalid_call_json:
                out.append(ConstraintViolation("schema", "tool call body is not valid JSON"))
            if parse_report.think_count > rules.get("max_think_blocks", 1):
                out.append(ConstraintViolation("style", "more than one <think> block"))
        if rules.get("require_think") and not turn.think:
            out.append(ConstraintViolation("style", "missing <think> block"))
        if rules.get("require_content_or_calls", True) and not turn.content.strip() and not turn.tool_calls:
            out.append(ConstraintViolation("style", "assistant turn has neither content nor tool calls"))
        for call in turn.tool_calls:
            report = validate_against(call, tools)
            for v in report.violations:
                if v.kind == "unknown_function":
                    out.append(ConstraintViolation("schema", f"hallucinated tool request: {call.function}"))
                else:
                    out.append(ConstraintViolation("schema", f"argument violation in {call.function}: {v.tag} {v.message}"))
            for arg in call.arguments if isinstance(call.arguments, Mapping) else ():
                needed = constraints.bindings.get((call.function, arg))
                if needed is None and arg in constraints.unknown_fields:
                    needed = arg
                if needed is not None and needed not in constraints.resolved:
                    out.append(
                        ConstraintViolation("schema", f"{call.function}.{arg} uses {needed} before any tool supplied it")
                    )
        return out
    return out


def self_reflect(
    turn: Turn,
    constraints: RoleConstraints,
    tools: Mapping[str, ToolSpec],
    corrector: Corrector | None = None,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    parse_report: ParseReport | None = None,
) -> ReflectionOutcome:
    """Check a turn and re-prompt its author until clean or out of attempts.

    ``attempts`` counts the generations checked once reflection engages:
    the flagged original is attempt 1, each correction adds one. A clean
    turn never engages reflection and comes back with zero attempts.
    """
    violations = check_turn(turn, constraints, tools, parse_report)
    if not violations:
        return ReflectionOutcome(turn, turn, [], 0, True)
    history = [violations]
    current, current_v = turn, violations
    attempts = 1
    while corrector is not None and attempts < max_attempts:
        attempts += 1
        fixed = corrector(current, current_v, attempts)
        report = None
        if isinstance(fixed, tuple):
            fixed, report = fixed
        current = fixed
        current_v = check_turn(current, constraints, tools, report)
        history.append(current_v)
        if not current_v:
            return ReflectionOutcome(turn, current, violations, attempts, True, history)
    return ReflectionOutcome(turn, current, violations, attempts, False, history)


# ---------------------------------------------------------------------------
# Hallucination ledger
# ---------------------------------------------------------------------------

DATA_TYPES = ("single_turn", "multi_turn")


@dataclass
class LedgerCounts:
    total: int = 0
    resolved: int = 0
    failed: int = 0

    @property
    def rate(self) -> float | None:
        return None if self.total == 0 else self.resolved / self.total


class HallucinationLedger:
    """Per data-type counters fed through a single serialized writer."""

    def __init__(self, log_path: str | Path | None = None):
        self.counts = {d: LedgerCounts() for d in DATA_TYPES}
        self.events: list[dict[str, Any]] = []
        self.log_path = Path(log_path) if log_path else None
        self._lock = threading.Lock()

    def record(self, data_type: str, resolved: bool) -> None:
        if data_type not in self.counts:
            raise ValueError(f"unknown data type {data_type!r}")
        event = {"data_type": data_type, "resolved": bool(resolved)}
        with self._lock:
            c = self.counts[data_type]
            c.total += 1
            if resolved:
                c.resolved += 1
            else:
                c.failed += 1
            self.events.append(event)
            if self.log_path is not None:
                with self.log_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event, sort_keys=True) + "\n")

    def rate(self, data_type: str) -> float | None:
        return self.counts[data_type].rate

    def snapshot(self) -> dict[str, Any]:
        return {
            d: {"total": c.total, "resolved": c.resolved, "failed": c.failed, "rate": c.rate}
            for d, c in self.counts.items()
        }

    @classmethod
    def replay(cls, events: Iterable[Mapping[str, Any]]) -> HallucinationLedger:
        ledger = cls()
        for ev in events:
            ledger.record(ev["data_type"], ev["resolved"])
        return ledger

    @classmethod
    def from_log(cls, path: str | Path) -> HallucinationLedger:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls.replay(json.loads(line) for line in lines if line.strip())


def ledger_update(ledger: HallucinationLedger, data_type: str, outcome: ReflectionOutcome) -> HallucinationLedger:
    if outcome.hallucinated:
        ledger.record(data_type, outcome.resolved)
    return ledger


# ---------------------------------------------------------------------------
# Consensus validation
# ---------------------------------------------------------------------------

VALIDATOR_PROMPT = """You review a synthetic tool-use conversation for a training set.
Check that every tool call is justified, arguments are grounded in what the
user said or what earlier tools returned, the final answer uses the results,
and no turn is redundant.

Reply with strict JSON only:
{"decision": "accept" | "reject" | "revise", "rationale": "<one sentence>",
 "redundant_turns": [<turn indices to drop when revising>],
 "rejected_segments": [[<first>, <last>], ...]}

rejected_segments lists tool-use attempts the user turned down."""


@dataclass(frozen=True)
class Vote:
    validator: str
    decision: str
    rationale: str = ""
    redundant_turns: tuple[int, ...] = ()
    rejected_segments: tuple[tuple[int, int], ...] = ()
    parsed: bool = True

    def to_json(self) -> dict[str, Any]:
        return {
            "validator": self.validator,
            "decision": self.decision,
            "rationale": self.rationale,
            "redundant_turns": list(self.redundant_turns),
            "rejected_segments": [list(s) for s in self.rejected_segments],
            "parsed": self.parsed,
        }


@dataclass
class ConsensusVerdict:
    votes: list[Vote]
    rounds: int
    final: str
    pruned_turn_indices: list[int] = field(default_factory=list)
    rejected_segments: list[list[int]] = field(default_factory=list)
    history: list[list[Vote]] = field(default_factory=list)
    note: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "final": self.final,
            "rounds": self.rounds,
            "votes": [v.to_json() for v in self.votes],
            "pruned_turn_indices": list(self.pruned_turn_indices),
            "rejected_segments": [list(s) for s in self.rejected_segments],
            "note": self.note,
        }


Validator = Callable[[Trajectory, Sequence[str] | None, int], "str | Vote"]


def parse_vote(text: str, validator: str) -> Vote:
    from .tree import extract_json

    try:
        obj = extract_json(text)
        decision = obj["decision"]
        if decision not in DECISIONS:
            raise ValueError(decision)
        redundant = tuple(int(i) for i in obj.get("redundant_turns", []) or [])
        segments = tuple((int(a), int(b)) for a, b in obj.get("rejected_segments", []) or [])
        return Vote(validator, decision, str(obj.get("rationale", "")), redundant, segments)
    except (ValueError, KeyError, TypeError) as exc:
        logger.info("validator %s vote unparseable: %s", validator, exc)
        return Vote(validator, "reject", "unparseable vote", parsed=False)


def backend_validators(backend: Backend, m: int) -> list[Validator]:
    def make(idx: int) -> Validator:
        def run(traj: Trajectory, peers: Sequence[str] | None, round_no: int) -> str:
            body = json.dumps(traj.to_json(), sort_keys=True)
            msgs = [Message("system", VALIDATOR_PROMPT), Message("user", body)]
            if peers:
                msgs.append(Message("user", "Other reviewers said:\n" + "\n".join(f"- {p}" for p in peers)))
            req = ChatRequest(
                tuple(msgs),
                temperature=0.0,
                agent="validator",
                metadata={"validator": idx, "round": round_no, "step": round_no, "fixture_key": f"{traj.id}:{idx}",
                          "trajectory": traj.to_json()},
            )
            return backend.chat(req).text

        return run

    return [make(i) for i in range(m)]


def _collect(traj: Trajectory, validators: Sequence[Validator], peers: Sequence[str] | None, round_no: int) -> list[Vote]:
    def one(item: tuple[int, Validator]) -> Vote:
        idx, validator = item
        raw = validator(traj, peers, round_no)
        return raw if isinstance(raw, Vote) else parse_vote(raw, f"v{idx}")

    with ThreadPoolExecutor(max_workers=len(validators)) as pool:
        return list(pool.map(one, enumerate(validators)))


def _majority(votes: Sequence[Vote]) -> str | None:
    counts = Counter(v.decision for v in votes)
    need = len(votes) // 2 + 1
    for decision in DECISIONS:
        if counts[decision] >= need:
            return decision
    return None


def prune_turns(turns: Sequence[Turn], indices: Iterable[int]) -> list[Turn]:
    drop = set(indices)
    return [t for i, t in enumerate(turns) if i not in drop]


def consensus_validate(
    traj: Trajectory,
    validators: Sequence[Validator],
    max_deliberation_rounds: int = 1,
) -> ConsensusVerdict:
    """Majority vote over an odd committee, one deliberation round on splits.

    A revise majority prunes the turns most revisers call redundant, and
    the result must still lint; splits that survive deliberation reject.
    """
    m = len(validators)
    if m < 3 or m % 2 == 0:
        raise ValueError("need an odd number of at least three validators")
    history: list[list[Vote]] = []
    votes = _collect(traj, validators, None, 0)
    history.append(votes)
    decision = _majority(votes)
    rounds = 1
    while decision is None and rounds <= max_deliberation_rounds:
        peers = [f"{v.validator} ({v.decision}): {v.rationale}" for v in votes]
        votes = _collect(traj, validators, peers, rounds)
        history.append(votes)
        rounds += 1
        decision = _majority(votes)

    seg_counts = Counter(s for v in votes for s in set(v.rejected_segments))
    segments = sorted([list(s) for s, n in seg_counts.items() if n > m // 2])
    verdict = ConsensusVerdict(votes, rounds, "reject", history=history, rejected_segments=segments)
    if decision is None:
        verdict.note = "no majority after deliberation"
        return verdict
    if decision == "revise":
        revisers = [v for v in votes if v.decision == "revise"]
        idx_counts = Counter(i for v in revisers for i in set(v.redundant_turns))
        chosen = sorted(i for i, n in idx_counts.items() if n > len(revisers) / 2 and 0 <= i < len(traj.turns))
        if not chosen:
            verdict.note = "revise majority named no common turns"
            return verdict
        problems = lint_turns(prune_turns(traj.turns, chosen))
        if problems:
            verdict.note = "pruned trajectory fails lint: " + "; ".join(problems)
            return verdict
        verdict.pruned_turn_indices = chosen
        verdict.final = "accept"
        return verdict
    verdict.final = decision
    return verdict


def apply_verdict(traj: Trajectory, verdict: ConsensusVerdict) -> Trajectory:
    qa = replace(traj.qa, consensus=verdict.to_json(), pruned_indices=list(verdict.pruned_turn_indices),
                 rejected_segments=[list(s) for s in verdict.rejected_segments])
    if verdict.final != "accept":
        qa.status = "rejected"
    turns, gold = traj.turns, traj.gold
    if verdict.pruned_turn_indices:
        qa.pruned_tokens += sum(traj.turns[i].token_count() for i in verdict.pruned_turn_indices)
        turns = prune_turns(traj.turns, verdict.pruned_turn_indices)
        if traj.category == "multi_turn":
            gold = [c for t in turns if t.role == "assistant" for c in t.tool_calls]
    return replace(traj, turns=turns, gold=gold, qa=qa)


# ---------------------------------------------------------------------------
# Rejection pruning
# ---------------------------------------------------------------------------


class PruneBreaksAlternation(ValueError):
    pass


def prune_rejections(traj: Trajectory) -> Trajectory:
    """Excise tool-use attempts the user turned down (``qa.rejected_segments``)."""
    segments = traj.qa.rejected_segments
    if not segments:
        return traj
    drop: set[int] = set()
    for seg in segments:
        start, end = int(seg[0]), int(seg[1])
        if not 0 <= start <= end < len(traj.turns):
            raise PruneBreaksAlternation(f"segment {seg} out of range")
        drop.update(range(start, end + 1))
    kept = [t for i, t in enumerate(traj.turns) if i not in drop]
    problems = lint_turns(kept)
    if problems:
        raise PruneBreaksAlternation("; ".join(problems))
    pruned_tokens = sum(traj.turns[i].token_count() for i in drop)
    qa = replace(traj.qa, rejected_segments=[], pruned_tokens=traj.qa.pruned_tokens + pruned_tokens,
                 pruned_indices=sorted(set(traj.qa.pruned_indices) | drop))
    gold = traj.gold
    if traj.category == "multi_turn":
        gold = [c for t in kept if t.role == "assistant" for c in t.tool_calls]
    return replace(traj, turns=kept, gold=gold, qa=qa)


def copy_qa(qa: QAInfo) -> QAInfo:
    return QAInfo.from_json(qa.to_json())
