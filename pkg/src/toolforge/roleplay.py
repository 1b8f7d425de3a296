"""Trajectory synthesis: task generation, the single-turn pipeline, and the
three-role playground (user simulator, tool agent, server simulator)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .backend import Backend, ChatRequest, Message
from .quality import (
    ConstraintViolation,
    ReflectionOutcome,
    RoleConstraints,
    self_reflect,
)
from .reward import align_calls, tool_reward
from .schema import (
    AssistantTurn,
    ParseReport,
    ToolCall,
    ToolSpec,
    parse_assistant_output,
    render_assistant_output,
    render_toolset_prompt,
    validate_call,
)
from .server import serve_tool_call
from .trajectory import (
    CATEGORIES,
    QAInfo,
    ScenarioInvalid,
    TaskScenario,
    ToolNeed,
    Trajectory,
    Turn,
    check_scenario,
    is_ref,
    resolved_unknowns,
)
from .tree import extract_json

logger = logging.getLogger(__name__)

SINGLE_KINDS = {"standard": "single_standard", "parallel": "single_parallel", "irrelevance": "irrelevance"}


class GenerationInvalid(ValueError):
    def __init__(self, message: str, trajectory: Trajectory | None = None):
        super().__init__(message)
        self.trajectory = trajectory


class UnresolvedInformation(RuntimeError):
    pass


TASK_PROMPT = """You design realistic tasks for a tool-using assistant.
Given the tools below and a difficulty level, write one scenario as strict JSON:
{"title", "user_profile", "known_info": {field: value}, "unknown_info": [field],
 "user_need", "difficulty", "tools_needed": [{"tool", "arguments", "provides"}],
 "success_criteria": [...]}
Argument values are literals, {"$known": key} or {"$unknown": field}.
known_info and unknown_info must not share keys; every unknown field must be
provided by some tool. Use only argument names that exist in the schemas."""

QUERY_PROMPT = """Write one user request for a tool-using assistant as strict JSON:
{"query": "...", "tools_needed": [{"tool", "arguments"}]}.
Kind: {kind}. For "parallel" the request needs at least two independent calls;
for "irrelevance" none of the tools can help and tools_needed is empty.
Every argument value must appear in the query text."""

USER_PROMPT = """You play a user talking to an assistant. Stay in persona:
{profile}
Your goal: {need}
You know: {known}
Reveal details when they are needed or asked for. Never state values you do
not know; in particular never guess {unknown}. Never write tool calls."""

AGENT_PROMPT = """You are a helpful assistant with access to tools.
Think inside <think></think>, then either call tools with
<tool_call>{"name": ..., "arguments": {...}}</tool_call> blocks (independent
calls may share one turn) or answer the user directly. Ask for missing
details instead of guessing. If no tool fits, say so."""


@dataclass
class SynthContext:
    """Everything a synthesis call needs besides its own inputs."""

    backend: Backend
    tools: Mapping[str, ToolSpec]
    server_mode: str = "template"
    seed: int = 0
    temperature: float = 0.7
    max_reflection_attempts: int = 3
    max_steps_per_round: int = 6
    max_generation_attempts: int = 3

    def subset(self, names: Sequence[str]) -> list[ToolSpec]:
        return [self.tools[n] for n in names]


@dataclass
class ReflectionLog:
    """Per-trajectory record of self-reflection outcomes, in order."""

    outcomes: list[tuple[str, bool]] = field(default_factory=list)  # (role, resolved)
    attempts: int = 0

    def add(self, role: str, outcome: ReflectionOutcome) -> None:
        self.attempts += outcome.attempts
        if outcome.hallucinated:
            self.outcomes.append((role, outcome.resolved))

    def apply(self, qa: QAInfo) -> None:
        qa.reflection_attempts = self.attempts
        qa.hallucinations = len(self.outcomes)
        qa.hallucinations_resolved = sum(1 for _, ok in self.outcomes if ok)


# ---------------------------------------------------------------------------
# Message plumbing
# ---------------------------------------------------------------------------


def render_turn(turn: Turn) -> Message:
    if turn.role == "assistant":
        text = render_assistant_output(AssistantTurn(turn.think, turn.content or None, turn.tool_calls))
        return Message("assistant", text)
    if turn.role == "tool":
        return Message("tool", json.dumps([r.payload for r in turn.tool_results], sort_keys=True))
    return Message(turn.role, turn.content)


def agent_messages(tools: Sequence[ToolSpec], turns: Sequence[Turn]) -> tuple[Message, ...]:
    system = AGENT_PROMPT + "\n\n" + render_toolset_prompt(tools)
    return (Message("system", system),) + tuple(render_turn(t) for t in turns)


def user_messages(scenario: TaskScenario, turns: Sequence[Turn]) -> tuple[Message, ...]:
    # the simulator sees the dialogue from the other side: roles swap
    system = USER_PROMPT.format(
        profile=scenario.user_profile,
        need=scenario.user_need,
        known=json.dumps(dict(scenario.known_info), sort_keys=True),
        unknown=", ".join(scenario.unknown_info) or "anything else",
    )
    msgs = [Message("system", system)]
    for t in turns:
        if t.role == "user":
            msgs.append(Message("assistant", t.content))
        elif t.role == "assistant" and t.content:
            msgs.append(Message("user", t.content))
    return tuple(msgs)


def to_turn(assistant: AssistantTurn, call_prefix: str) -> Turn:
    calls = tuple(
        ToolCall(c.function, c.arguments, id=f"{call_prefix}_{j}") for j, c in enumerate(assistant.tool_calls)
    )
    return Turn("assistant", assistant.content or "", calls, (), assistant.think)


def _feedback(violations: Sequence[ConstraintViolation]) -> str:
    lines = "\n".join(f"- [{v.tag}] {v.message}" for v in violations)
    return f"Your previous message broke these rules:\n{lines}\nRewrite it so that it follows them."


# ---------------------------------------------------------------------------
# Task generation
# ---------------------------------------------------------------------------


def generate_task(
    tools: Sequence[ToolSpec],
    difficulty: str,
    backend: Backend,
    max_attempts: int = 3,
    seed: int = 0,
    temperature: float = 0.7,
) -> TaskScenario:
    """Ask the task generator for a scenario, retrying with the problems found."""
    if not tools:
        raise ScenarioInvalid("no tools to build a scenario from")
    by_name = {t.name: t for t in tools}
    messages = [
        Message("system", TASK_PROMPT),
        Message("user", f"Difficulty: {difficulty}\n" + render_toolset_prompt(tools)),
    ]
    problems: list[str] = []
    for attempt in range(max_attempts):
        req = ChatRequest(
            tuple(messages),
            temperature=temperature,
            agent="task_generator",
            metadata={
                "step": attempt,
                "fixture_key": "|".join(t.name for t in tools),
                "tools": [t.to_json() for t in tools],
                "difficulty": difficulty,
                "seed": seed,
                "feedback": problems,
            },
        )
        text = backend.chat(req).text
        try:
            scenario = TaskScenario.from_json(extract_json(text))
            return check_scenario(scenario, by_name)
        except (ScenarioInvalid, ValueError) as exc:
            problems = [str(exc)]
            logger.info("scenario attempt %d rejected: %s", attempt + 1, exc)
            messages += [Message("assistant", text), Message("user", f"Invalid scenario: {exc}. Try again.")]
    raise ScenarioInvalid(f"no valid scenario after {max_attempts} attempts: {problems[0] if problems else ''}")


# ---------------------------------------------------------------------------
# Shared turn machinery
# ---------------------------------------------------------------------------


class _Session:
    """One trajectory's sequential role loop."""

    def __init__(self, ctx: SynthContext, traj_id: str, tool_names: Sequence[str], scenario: TaskScenario, mode: str):
        self.ctx = ctx
        self.id = traj_id
        self.specs = ctx.subset(tool_names)
        self.toolmap = {t.name: t for t in self.specs}
        self.scenario = scenario
        self.mode = mode
        self.turns: list[Turn] = []
        self.log = ReflectionLog()
        self.unknown = tuple(scenario.unknown_info)
        self.bindings = {
            (need.tool, arg): value["$unknown"]
            for need in scenario.tools_needed
            for arg, value in need.arguments.items()
            if is_ref(value) and "$unknown" in value
        }
        self.provides: dict[str, list[str]] = {}
        for need in scenario.tools_needed:
            self.provides.setdefault(need.tool, []).extend(need.provides)

    def resolved(self) -> dict[str, Any]:
        return resolved_unknowns(self.turns, self.unknown)

    def meta(self, **extra: Any) -> dict[str, Any]:
        base = {
            "trajectory": self.id,
            "mode": self.mode,
            "scenario": self.scenario.to_json(),
            "turns": [t.to_json() for t in self.turns],
            "seed": self.ctx.seed,
        }
        base.update(extra)
        return base

    def _agent_chat(self, extra_msgs: Sequence[Message], meta: dict[str, Any]) -> tuple[AssistantTurn, ParseReport]:
        req = ChatRequest(
            agent_messages(self.specs, self.turns) + tuple(extra_msgs),
            tools=tuple(self.specs),
            temperature=self.ctx.temperature,
            agent="tool_agent",
            metadata=meta,
        )
        return parse_assistant_output(self.ctx.backend.chat(req).text)

    def assistant_turn(self, round_no: int, step: int) -> Turn:
        prefix = f"call_{len(self.turns)}"
        base_meta = {"round": round_no, "step": step}
        parsed, report = self._agent_chat((), self.meta(reflection_attempt=0, violations=[], **base_meta))
        turn = to_turn(parsed, prefix)
        draft = [render_turn(turn)]

        def corrector(bad: Turn, violations: list[ConstraintViolation], attempt: int):
            msgs = (render_turn(bad), Message("user", _feedback(violations)))
            fixed, rep = self._agent_chat(
                msgs,
                self.meta(reflection_attempt=attempt, violations=[v.to_json() for v in violations], **base_meta),
            )
            draft.append(msgs[0])
            return to_turn(fixed, prefix), rep

        constraints = RoleConstraints("assistant", self.unknown, self.resolved(), self.bindings)
        outcome = self_reflect(turn, constraints, self.toolmap, corrector, self.ctx.max_reflection_attempts, report)
        self.log.add("assistant", outcome)
        if not outcome.resolved:
            raise _TurnFailed(f"assistant turn unresolved after reflection: {outcome.violations[0].message}")
        return outcome.corrected

    def user_turn(self, round_no: int, rounds: int) -> Turn:
        def ask(attempt: int, violations: Sequence[ConstraintViolation], bad: Turn | None) -> Turn:
            msgs = user_messages(self.scenario, self.turns)
            if bad is not None:
                msgs += (Message("assistant", bad.content), Message("user", _feedback(violations)))
            req = ChatRequest(
                msgs,
                temperature=self.ctx.temperature,
                agent="user_simulator",
                metadata=self.meta(
                    round=round_no,
                    rounds=rounds,
                    step=round_no,
                    reflection_attempt=attempt,
                    violations=[v.to_json() for v in violations],
                ),
            )
            return Turn("user", self.ctx.backend.chat(req).text.strip())

        turn = ask(0, (), None)
        constraints = RoleConstraints("user", self.unknown, self.resolved())
        outcome = self_reflect(
            turn, constraints, self.toolmap, lambda bad, v, k: ask(k, v, bad), self.ctx.max_reflection_attempts
        )
        self.log.add("user", outcome)
        if not outcome.resolved:
            raise _TurnFailed(f"user turn unresolved after reflection: {outcome.violations[0].message}")
        return outcome.corrected

    def execute(self, turn: Turn) -> Turn:
        results = []
        for call in turn.tool_calls:
            spec = self.toolmap[call.function]
            results.append(
                serve_tool_call(
                    call,
                    spec,
                    self.ctx.server_mode,
                    seed=self.ctx.seed,
                    backend=self.ctx.backend,
                    provides=self.provides.get(call.function, ()),
                )
            )
        return Turn("tool", "", (), tuple(results))

    def exchange(self, round_no: int) -> None:
        """Agent/tool steps until the agent answers in words."""
        for step in range(self.ctx.max_steps_per_round):
            turn = self.assistant_turn(round_no, step)
            self.turns.append(turn)
            if not turn.tool_calls:
                return
            self.turns.append(self.execute(turn))
        raise _TurnFailed(f"round {round_no}: no answer within {self.ctx.max_steps_per_round} steps")

    def trajectory(self, category: str, gold: list[ToolCall], status: str = "ok", failure: str = "") -> Trajectory:
        qa = QAInfo(status=status, failure=failure, tools=[t.name for t in self.specs])
        self.log.apply(qa)
        traj = Trajectory(self.id, category, list(self.turns), gold, self.scenario, qa)
        qa.user_rounds = traj.user_rounds()
        return traj


class _TurnFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Multi-turn role play
# ---------------------------------------------------------------------------


def run_roleplay(
    scenario: TaskScenario,
    tools: Sequence[str],
    max_rounds: int,
    ctx: SynthContext,
    traj_id: str = "mt-0",
) -> Trajectory:
    """Play ``max_rounds`` rounds of user / agent / server.

    A round is one user message plus the agent and tool turns it triggers.
    Failures (unresolvable reflection, outstanding unknown info before the
    closing round) come back as a trajectory with ``qa.status == "failed"``.
    """
    if not 3 <= max_rounds <= 5:
        raise ValueError("max_rounds must lie in [3, 5]")
    session = _Session(ctx, traj_id, tools, scenario, "multi_turn")
    check_scenario(scenario, session.toolmap)
    try:
        for r in range(max_rounds):
            if r == max_rounds - 1:
                missing = [f for f in scenario.unknown_info if f not in session.resolved()]
                if missing:
                    raise UnresolvedInformation(f"unknown info outstanding before the closing round: {missing}")
            session.turns.append(session.user_turn(r, max_rounds))
            session.exchange(r)
    except (_TurnFailed, UnresolvedInformation) as exc:
        logger.info("%s failed: %s", traj_id, exc)
        return session.trajectory("multi_turn", [], "failed", f"{type(exc).__name__}: {exc}")
    gold = [c for t in session.turns if t.role == "assistant" for c in t.tool_calls]
    return session.trajectory("multi_turn", gold)


# ---------------------------------------------------------------------------
# Single-turn pipeline
# ---------------------------------------------------------------------------


def _query_spec(kind: str, tools: Sequence[ToolSpec], ctx: SynthContext, attempt: int) -> tuple[str, list[ToolCall]]:
    req = ChatRequest(
        (Message("system", QUERY_PROMPT.replace("{kind}", kind)), Message("user", render_toolset_prompt(tools))),
        temperature=ctx.temperature,
        agent="query_generator",
        metadata={
            "step": attempt,
            "fixture_key": f"{kind}:" + "|".join(t.name for t in tools),
            "kind": kind,
            "tools": [t.to_json() for t in tools],
            "seed": ctx.seed,
        },
    )
    text = ctx.backend.chat(req).text
    try:
        obj = extract_json(text)
        query = str(obj["query"]).strip()
        calls = [ToolCall(n["tool"], dict(n.get("arguments", {}))) for n in obj.get("tools_needed", [])]
    except (ValueError, KeyError, TypeError) as exc:
        raise GenerationInvalid(f"query generator output unusable: {exc}") from exc
    if not query:
        raise GenerationInvalid("empty query")
    by_name = {t.name: t for t in tools}
    for c in calls:
        if c.function not in by_name or not validate_call(c, by_name[c.function]).ok:
            raise GenerationInvalid(f"intended call {c.function} does not validate")
    return query, calls


def _check_kind(kind: str, intended: Sequence[ToolCall]) -> None:
    if kind == "standard" and len(intended) != 1:
        raise GenerationInvalid("standard sample needs exactly one call")
    if kind == "parallel" and len(intended) < 2:
        raise GenerationInvalid("parallel sample needs at least two calls")
    if kind == "irrelevance" and intended:
        raise GenerationInvalid("irrelevance sample must not need tools")


def synth_single_turn(
    kind: str,
    tools: Sequence[str],
    ctx: SynthContext,
    traj_id: str = "st-0",
) -> Trajectory:
    """One user query, the agent's calls (or refusal), results, final answer.

    The whole sample is regenerated up to ``ctx.max_generation_attempts``
    times; the last failure is raised as GenerationInvalid with the partial
    trajectory attached so its reflection stats are not lost.
    """
    if kind not in SINGLE_KINDS:
        raise ValueError(f"unknown single-turn kind {kind!r}")
    category = SINGLE_KINDS[kind]
    if kind == "parallel" and len(tools) < 2:
        raise ValueError("parallel synthesis needs at least two tools")
    if not tools:
        raise ValueError("synthesis needs at least one tool")
    specs = ctx.subset(tools)
    last: GenerationInvalid | None = None
    carried = ReflectionLog()
    for attempt in range(ctx.max_generation_attempts):
        try:
            query, intended = _query_spec(kind, specs, ctx, attempt)
            _check_kind(kind, intended)
        except GenerationInvalid as exc:
            last = exc
            continue
        scenario = TaskScenario(
            user_profile="",
            known_info={},
            unknown_info=(),
            user_need=query,
            difficulty="easy",
            tools_needed=tuple(ToolNeed(c.function, dict(c.arguments)) for c in intended),
        )
        session = _Session(ctx, traj_id, tools, scenario, category)
        session.log = carried
        try:
            user = Turn("user", query)
            outcome = self_reflect(user, RoleConstraints("user"), session.toolmap, None, 0)
            session.log.add("user", outcome)
            if not outcome.resolved:
                raise _TurnFailed(f"query breaks user style: {outcome.violations[0].message}")
            session.turns.append(user)
            first = session.assistant_turn(0, attempt)
            session.turns.append(first)
            if first.tool_calls:
                session.turns.append(session.execute(first))
                session.exchange(0)
        except _TurnFailed as exc:
            last = GenerationInvalid(str(exc), session.trajectory(category, [], "failed", str(exc)))
            continue
        gold = list(first.tool_calls)
        problem = _verify_single(kind, session.turns, gold, intended)
        if problem:
            last = GenerationInvalid(problem, session.trajectory(category, gold, "failed", problem))
            continue
        return session.trajectory(category, gold)
    assert last is not None
    if last.trajectory is None:
        last.trajectory = Trajectory(traj_id, category, [], [], None, QAInfo(status="failed", failure=str(last)))
        carried.apply(last.trajectory.qa)
    raise last


def _verify_single(kind: str, turns: Sequence[Turn], gold: Sequence[ToolCall], intended: Sequence[ToolCall]) -> str:
    call_turns = [t for t in turns if t.role == "assistant" and t.tool_calls]
    if kind == "irrelevance":
        if call_turns:
            return "irrelevance sample: agent called a tool"
        return ""
    if len(call_turns) != 1:
        return f"expected one calling turn, got {len(call_turns)}"
    if kind == "standard" and len(gold) != 1:
        return f"standard sample made {len(gold)} calls"
    if kind == "parallel" and len(gold) < 2:
        return "parallel sample made fewer than two calls"
    if tool_reward(align_calls(gold, intended), intended) != 1.0:
        return "agent calls do not match the query's intent"
    return ""


def category_of(kind: str) -> str:
    cat = SINGLE_KINDS.get(kind, kind)
    if cat not in CATEGORIES:
        raise ValueError(f"unknown category {kind!r}")
    return cat
