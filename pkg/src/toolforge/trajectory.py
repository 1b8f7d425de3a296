"""Trajectory data model, JSON format and structural checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from .backend import count_tokens
from .schema import ToolCall, ToolSpec, validate_against

CATEGORIES = ("single_standard", "single_parallel", "irrelevance", "multi_turn")
DIFFICULTIES = ("easy", "medium", "hard")
TURN_ROLES = ("system", "user", "assistant", "tool")


class ScenarioInvalid(ValueError):
    pass


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


def is_ref(value: Any) -> bool:
    return isinstance(value, Mapping) and len(value) == 1 and next(iter(value)) in ("$known", "$unknown")


@dataclass(frozen=True)
class ToolNeed:
    """One expected tool use. Argument values are literals or references:
    ``{"$known": key}`` into known_info, ``{"$unknown": field}`` to a value a
    previous tool result supplies."""

    tool: str
    arguments: Mapping[str, Any] = field(default_factory=dict)
    provides: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {"tool": self.tool, "arguments": dict(self.arguments), "provides": list(self.provides)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ToolNeed:
        name = obj.get("tool", obj.get("name"))
        if not isinstance(name, str):
            raise ScenarioInvalid("tools_needed entry lacks a tool name")
        args = obj.get("arguments", {}) or {}
        if not isinstance(args, Mapping):
            raise ScenarioInvalid("tools_needed arguments must be an object")
        provides = obj.get("provides", []) or []
        return cls(name, dict(args), tuple(str(p) for p in provides))

    def unknown_refs(self) -> list[str]:
        return [v["$unknown"] for v in self.arguments.values() if is_ref(v) and "$unknown" in v]


@dataclass(frozen=True)
class TaskScenario:
    user_profile: str
    known_info: Mapping[str, Any]
    unknown_info: tuple[str, ...]
    user_need: str
    difficulty: str
    tools_needed: tuple[ToolNeed, ...]
    success_criteria: tuple[str, ...] = ()
    title: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "title": self.title,
            "user_profile": self.user_profile,
            "known_info": dict(self.known_info),
            "unknown_info": list(self.unknown_info),
            "user_need": self.user_need,
            "difficulty": self.difficulty,
            "tools_needed": [t.to_json() for t in self.tools_needed],
            "success_criteria": list(self.success_criteria),
        }

    @classmethod
    def from_json(cls, obj: Any) -> TaskScenario:
        if not isinstance(obj, Mapping):
            raise ScenarioInvalid("scenario must be an object")
        # accept the documented layout with a nested task_data block
        task = obj.get("task_data") if isinstance(obj.get("task_data"), Mapping) else {}
        try:
            known = obj.get("known_info", {}) or {}
            unknown = obj.get("unknown_info", []) or []
            if isinstance(unknown, Mapping):
                unknown = list(unknown)
            needs = obj.get("tools_needed", task.get("tools_needed", [])) or []
            return cls(
                user_profile=str(obj.get("user_profile", "")),
                known_info=dict(known),
                unknown_info=tuple(str(u) for u in unknown),
                user_need=str(obj.get("user_need", task.get("user_goal", ""))),
                difficulty=str(obj.get("difficulty", task.get("difficulty", "medium"))),
                tools_needed=tuple(ToolNeed.from_json(n) for n in needs),
                success_criteria=tuple(str(s) for s in obj.get("success_criteria", task.get("success_criteria", [])) or []),
                title=str(obj.get("title", "")),
            )
        except (TypeError, ValueError, AttributeError) as exc:
            if isinstance(exc, ScenarioInvalid):
                raise
            raise ScenarioInvalid(f"malformed scenario: {exc}") from exc


def scenario_problems(scenario: TaskScenario, tools: Mapping[str, ToolSpec], irrelevance: bool = False) -> list[str]:
    problems = []
    overlap = set(scenario.known_info) & set(scenario.unknown_info)
    if overlap:
        problems.append(f"fields both known and unknown: {sorted(overlap)}")
    if scenario.difficulty not in DIFFICULTIES:
        problems.append(f"difficulty {scenario.difficulty!r} not in {DIFFICULTIES}")
    if not irrelevance and not scenario.tools_needed:
        problems.append("tools_needed is empty")
    provided: set[str] = set()
    for need in scenario.tools_needed:
        spec = tools.get(need.tool)
        if spec is None:
            problems.append(f"tool {need.tool!r} is not in the toolset")
            continue
        for arg, value in need.arguments.items():
            if arg not in spec.parameters:
                problems.append(f"{need.tool}: argument {arg!r} not in schema")
            if is_ref(value):
                if "$known" in value and value["$known"] not in scenario.known_info:
                    problems.append(f"{need.tool}.{arg}: unknown known_info key {value['$known']!r}")
                if "$unknown" in value and value["$unknown"] not in provided:
                    problems.append(f"{need.tool}.{arg}: {value['$unknown']!r} is not supplied by an earlier tool")
        missing = spec.required - set(need.arguments)
        if missing:
            problems.append(f"{need.tool}: required arguments not bound: {sorted(missing)}")
        provided.update(need.provides)
    unresolvable = set(scenario.unknown_info) - provided
    if unresolvable:
        problems.append(f"unknown_info never supplied by a tool: {sorted(unresolvable)}")
    return problems


def check_scenario(scenario: TaskScenario, tools: Mapping[str, ToolSpec], irrelevance: bool = False) -> TaskScenario:
    problems = scenario_problems(scenario, tools, irrelevance)
    if problems:
        raise ScenarioInvalid("; ".join(problems))
    return scenario


def resolve_binding(value: Any, known: Mapping[str, Any], resolved: Mapping[str, Any]) -> tuple[bool, Any]:
    """Return (available, concrete value) for a scenario argument binding."""
    if is_ref(value):
        if "$known" in value:
            key = value["$known"]
            return (key in known, known.get(key))
        key = value["$unknown"]
        return (key in resolved, resolved.get(key))
    return True, value


# ---------------------------------------------------------------------------
# Turns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolResult:
    call_id: str
    status: str
    payload: Any

    def __post_init__(self) -> None:
        if self.status not in ("ok", "error"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "error" and not (isinstance(self.payload, Mapping) and "error" in self.payload):
            raise ValueError("error results must carry an error object")

    def to_json(self) -> dict[str, Any]:
        return {"call_id": self.call_id, "status": self.status, "payload": self.payload}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ToolResult:
        return cls(str(obj.get("call_id", "")), obj.get("status", "ok"), obj.get("payload"))


@dataclass(frozen=True)
class Turn:
    role: str
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    tool_results: tuple[ToolResult, ...] = ()
    think: str | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.think is not None:
            out["think"] = self.think
        if self.role == "assistant":
            out["tool_calls"] = [c.to_json() for c in self.tool_calls]
        if self.role == "tool":
            out["tool_results"] = [r.to_json() for r in self.tool_results]
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> Turn:
        role = obj.get("role")
        if role not in TURN_ROLES:
            raise ValueError(f"bad role {role!r}")
        return cls(
            role=role,
            content=str(obj.get("content") or ""),
            tool_calls=tuple(ToolCall.from_json(c) for c in obj.get("tool_calls", []) or []),
            tool_results=tuple(ToolResult.from_json(r) for r in obj.get("tool_results", []) or []),
            think=obj.get("think"),
        )

    def token_count(self) -> int:
        n = count_tokens(self.content) + count_tokens(self.think or "")
        n += sum(count_tokens(json.dumps(c.to_json(), sort_keys=True)) for c in self.tool_calls)
        n += sum(count_tokens(json.dumps(r.payload, sort_keys=True, default=str)) for r in self.tool_results)
        return n


@dataclass
class QAInfo:
    status: str = "ok"  # ok | failed | rejected
    failure: str = ""
    reflection_attempts: int = 0
    hallucinations: int = 0
    hallucinations_resolved: int = 0
    consensus: dict[str, Any] | None = None
    pruned_indices: list[int] = field(default_factory=list)
    rejected_segments: list[list[int]] = field(default_factory=list)
    pruned_tokens: int = 0
    tools: list[str] = field(default_factory=list)
    user_rounds: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "failure": self.failure,
            "reflection_attempts": self.reflection_attempts,
            "hallucinations": self.hallucinations,
            "hallucinations_resolved": self.hallucinations_resolved,
            "consensus": self.consensus,
            "pruned_indices": list(self.pruned_indices),
            "rejected_segments": [list(s) for s in self.rejected_segments],
            "pruned_tokens": self.pruned_tokens,
            "tools": list(self.tools),
            "user_rounds": self.user_rounds,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any] | None) -> QAInfo:
        obj = obj or {}
        return cls(
            status=obj.get("status", "ok"),
            failure=obj.get("failure", ""),
            reflection_attempts=int(obj.get("reflection_attempts", 0)),
            hallucinations=int(obj.get("hallucinations", 0)),
            hallucinations_resolved=int(obj.get("hallucinations_resolved", 0)),
            consensus=obj.get("consensus"),
            pruned_indices=list(obj.get("pruned_indices", [])),
            rejected_segments=[list(s) for s in obj.get("rejected_segments", [])],
            pruned_tokens=int(obj.get("pruned_tokens", 0)),
            tools=list(obj.get("tools", [])),
            user_rounds=int(obj.get("user_rounds", 0)),
        )


@dataclass
class Trajectory:
    id: str
    category: str
    turns: list[Turn]
    gold: list[ToolCall] = field(default_factory=list)
    scenario: TaskScenario | None = None
    qa: QAInfo = field(default_factory=QAInfo)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "category": self.category,
            "scenario": self.scenario.to_json() if self.scenario else None,
            "turns": [t.to_json() for t in self.turns],
            "gold": [c.to_json() for c in self.gold],
            "qa": self.qa.to_json(),
        }

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> Trajectory:
        category = obj.get("category")
        if category not in CATEGORIES:
            raise ValueError(f"bad category {category!r}")
        scenario = obj.get("scenario")
        return cls(
            id=str(obj["id"]),
            category=category,
            turns=[Turn.from_json(t) for t in obj.get("turns", [])],
            gold=[ToolCall.from_json(c) for c in obj.get("gold", [])],
            scenario=TaskScenario.from_json(scenario) if scenario else None,
            qa=QAInfo.from_json(obj.get("qa")),
        )

    @property
    def query(self) -> str:
        for t in self.turns:
            if t.role == "user":
                return t.content
        return ""

    def user_rounds(self) -> int:
        return sum(1 for t in self.turns if t.role == "user")

    def calls(self) -> list[ToolCall]:
        return [c for t in self.turns if t.role == "assistant" for c in t.tool_calls]

    def token_count(self) -> int:
        return sum(t.token_count() for t in self.turns)


def read_jsonl(text: str) -> list[Trajectory]:
    return [Trajectory.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


def write_jsonl(trajs: Iterable[Trajectory]) -> str:
    return "".join(t.to_line() + "\n" for t in trajs)


# ---------------------------------------------------------------------------
# Linting
# ---------------------------------------------------------------------------


def lint_turns(turns: Sequence[Turn]) -> list[str]:
    """Role-order problems in a turn list; empty means legal."""
    problems = []
    body = [(i, t) for i, t in enumerate(turns) if t.role != "system"]
    if not body:
        return ["no turns"]
    if body[0][1].role != "user":
        problems.append(f"turn {body[0][0]}: conversation must open with a user turn")
    for (i, t), nxt in zip(body, body[1:] + [(None, None)]):
        j, n = nxt
        if t.role == "user" and n is not None and n.role == "user":
            problems.append(f"turns {i},{j}: consecutive user turns")
        if t.role == "assistant":
            if not t.tool_calls and not t.content.strip():
                problems.append(f"turn {i}: empty assistant turn")
            if t.tool_calls and (n is None or n.role != "tool"):
                problems.append(f"turn {i}: tool calls not followed by a tool turn")
        if t.role == "tool":
            prev = turns[i - 1] if i > 0 else None
            if prev is None or prev.role != "assistant" or not prev.tool_calls:
                problems.append(f"turn {i}: tool turn does not follow an assistant tool call")
            elif len(t.tool_results) != len(prev.tool_calls):
                problems.append(
                    f"turn {i}: {len(t.tool_results)} results for {len(prev.tool_calls)} calls"
                )
        if t.tool_calls and t.role != "assistant":
            problems.append(f"turn {i}: only assistant turns may carry tool calls")
    last_i, last = body[-1]
    if last.role != "assistant" or last.tool_calls:
        problems.append(f"turn {last_i}: trajectory must end with an assistant answer")
    return problems


def lint_trajectory(
    traj: Trajectory,
    tools: Mapping[str, ToolSpec] | None = None,
    rounds: tuple[int, int] | None = None,
) -> list[str]:
    problems = lint_turns(traj.turns)
    if tools is not None:
        for i, t in enumerate(traj.turns):
            for call in t.tool_calls:
                report = validate_against(call, tools)
                if not report.ok:
                    problems.append(f"turn {i}: call {call.function} invalid: {report.tags}")
        for call in traj.gold:
            if not validate_against(call, tools).ok:
                problems.append(f"gold call {call.function} invalid")
    if traj.category == "single_standard" and len(traj.gold) != 1:
        problems.append("single_standard gold must hold exactly one call")
    if traj.category == "single_parallel":
        if len(traj.gold) < 2:
            problems.append("single_parallel gold must hold at least two calls")
        call_turns = [t for t in traj.turns if t.role == "assistant" and t.tool_calls]
        if len(call_turns) != 1:
            problems.append("single_parallel calls must sit in one assistant turn")
    if traj.category == "irrelevance" and (traj.gold or traj.calls()):
        problems.append("irrelevance trajectories must not call tools")
    if traj.category == "multi_turn" and rounds is not None:
        n = traj.user_rounds()
        if not rounds[0] <= n <= rounds[1]:
            problems.append(f"multi_turn has {n} user rounds, outside {rounds}")
    return problems


# ---------------------------------------------------------------------------
# Information provenance
# ---------------------------------------------------------------------------


def find_field(payload: Any, name: str) -> tuple[bool, Any]:
    """Depth-first search for a scalar under key ``name``."""
    if isinstance(payload, Mapping):
        if name in payload and isinstance(payload[name], (str, int, float)) and not isinstance(payload[name], bool):
            return True, payload[name]
        for v in payload.values():
            found, val = find_field(v, name)
            if found:
                return True, val
    elif isinstance(payload, list):
        for v in payload:
            found, val = find_field(v, name)
            if found:
                return True, val
    return False, None


def resolved_unknowns(turns: Sequence[Turn], fields: Iterable[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    fields = list(fields)
    for t in turns:
        if t.role != "tool":
            continue
        for r in t.tool_results:
            if r.status != "ok":
                continue
            for f in fields:
                if f not in out:
                    found, val = find_field(r.payload, f)
                    if found:
                        out[f] = val
    return out


def _mentions(text: str, value: Any) -> bool:
    s = str(value)
    return len(s) >= 4 and s in text


def _same_value(a: Any, b: Any) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return a is b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return a == b
    if isinstance(a, str) and isinstance(b, str):
        return a.strip() == b.strip()
    return False


def _contains_value(obj: Any, value: Any) -> bool:
    if isinstance(obj, Mapping):
        return any(_contains_value(v, value) for v in obj.values())
    if isinstance(obj, list):
        return any(_contains_value(v, value) for v in obj)
    return _same_value(obj, value)


def provenance_violations(traj: Trajectory) -> list[str]:
    """Unknown-info values used before a tool result supplied them."""
    if traj.scenario is None or not traj.scenario.unknown_info:
        return []
    final = resolved_unknowns(traj.turns, traj.scenario.unknown_info)
    first_seen: dict[str, int] = {}
    for i, t in enumerate(traj.turns):
        if t.role == "tool":
            for f in final:
                if f not in first_seen and f in resolved_unknowns([t], [f]):
                    first_seen[f] = i
    problems = []
    for i, t in enumerate(traj.turns):
        for f, val in final.items():
            if i >= first_seen.get(f, len(traj.turns)):
                continue
            if t.role == "user" and _mentions(t.content, val):
                problems.append(f"turn {i}: user states {f}={val!r} before any tool supplied it")
            if t.role == "assistant":
                for call in t.tool_calls:
                    if _contains_value(call.arguments, val) and _mentions(json.dumps(call.arguments), val):
                        problems.append(f"turn {i}: argument uses {f}={val!r} before any tool supplied it")
    return problems


def replace_turns(traj: Trajectory, turns: list[Turn]) -> Trajectory:
    return replace(traj, turns=turns)
