"""Offline stand-ins for every LLM agent in the pipeline.

Each responder is a pure function of the request (its messages and
metadata) and a seeded RNG, so a ScriptedBackend built from
``simulated_backend`` reproduces a whole pipeline run byte for byte. The
agents are deliberately imperfect in configurable ways: the tool agent
sometimes hallucinates a tool or mistypes an argument, the user simulator
sometimes leaks tool syntax, and the policy is weaker on chosen
(tool, category) cells. That gives self-reflection, consensus and
stratification something real to catch.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

from .backend import ChatRequest, ScriptedBackend
from .schema import (
    AssistantTurn,
    ToolCall,
    ToolSpec,
    example_value,
    parse_tool_spec,
    render_assistant_output,
)
from .server import template_payload
from .trajectory import (
    TaskScenario,
    ToolNeed,
    Trajectory,
    Turn,
    is_ref,
    lint_turns,
    provenance_violations,
    resolve_binding,
    resolved_unknowns,
)

Responder = Callable[[ChatRequest, random.Random], str]

PERSONAS = (
    "Operations manager at a mid-sized importer; terse, wants numbers.",
    "Graduate student planning a trip; friendly and a little chatty.",
    "Small-business owner; polite, cautious about costs.",
    "Freelance analyst; precise, asks follow-up questions.",
    "Retired engineer; formal, likes confirmations.",
)

OFF_TOPIC = (
    "Translate this poem into French for me: 'The river sleeps beneath the hill.'",
    "Write a haiku about the first snow of winter.",
    "What is your favourite colour, and why?",
    "Compose a short limerick about a cat who loves jazz.",
    "Can you proofread my cover letter for tone?",
    "Summarise the plot of a novel I am thinking of writing about lighthouses.",
)


@dataclass(frozen=True)
class SimulationConfig:
    """Knobs for the scripted agents. Irrelevant when a real backend is used."""

    single_hallucination_rate: float = 0.2
    single_fix_rate: float = 0.6
    multi_hallucination_rate: float = 0.1
    multi_fix_rate: float = 0.3
    user_slip_rate: float = 0.05
    user_fix_rate: float = 0.9
    policy_skill: float = 0.85
    weak_skill: float = 0.3
    weak_cells: tuple[tuple[str, str], ...] = ()
    validator_noise: float = 0.05
    invalid_scenario_rate: float = 0.1

    def to_json(self) -> dict[str, Any]:
        out = dict(self.__dict__)
        out["weak_cells"] = [list(c) for c in self.weak_cells]
        return out


def value_text(value: Any) -> str:
    """How a value is written in conversation, and how agents look for it."""
    return value if isinstance(value, str) else json.dumps(value, sort_keys=True)


def words(name: str) -> str:
    return name.replace("_", " ")


def _specs(meta_specs: Sequence[Mapping[str, Any]]) -> list[ToolSpec]:
    return [parse_tool_spec(s) for s in meta_specs]


# ---------------------------------------------------------------------------
# Task generator
# ---------------------------------------------------------------------------


def _provided_field(spec: ToolSpec, want_string: bool) -> str:
    returns = spec.extra.get("returns")
    if isinstance(returns, Mapping) and isinstance(returns.get("properties"), Mapping):
        props = returns["properties"]
        for name in sorted(props):
            kind = props[name].get("type", "string") if isinstance(props[name], Mapping) else "string"
            if not want_string or kind == "string":
                return name
    return f"{spec.name}_ref" if want_string else f"{spec.name}_result"


_ID_WORDS = ("id", "number", "reference", "ref", "code", "ticker", "query", "text")


def _link_param(spec: ToolSpec) -> str | None:
    """A string parameter that can sensibly take an earlier tool's output."""
    names = sorted(spec.parameters, key=lambda n: (n not in spec.required, n))
    for n in names:
        last = n.lower().rsplit("_", 1)[-1]
        if spec.parameters[n].kind == "string" and last in _ID_WORDS:
            return n
    return None


def build_scenario(tools: Sequence[ToolSpec], difficulty: str, rng: random.Random) -> TaskScenario:
    """A valid scenario over a prefix of ``tools``; harder means longer chains."""
    n = {"easy": 1, "medium": 2, "hard": 3}.get(difficulty, 1)
    chosen = list(tools[: max(1, min(n, len(tools)))])
    chain = difficulty == "hard" or (difficulty == "medium" and rng.random() < 0.5)
    known: dict[str, Any] = {}
    needs: list[ToolNeed] = []
    unknown: list[str] = []
    prev_field: str | None = None
    for i, spec in enumerate(chosen):
        link = _link_param(spec) if (chain and prev_field is not None) else None
        args: dict[str, Any] = {}
        for pname in sorted(spec.parameters):
            if pname == link:
                args[pname] = {"$unknown": prev_field}
                continue
            if pname not in spec.required and rng.random() > 0.3:
                continue
            value = example_value(spec.parameters[pname], rng, pname)
            key = pname
            if key in known and known[key] != value:
                key = f"{spec.name}_{pname}"
            known[key] = value
            args[pname] = {"$known": key}
        last = i == len(chosen) - 1
        fld = _provided_field(spec, want_string=chain and not last)
        while fld in known or fld in unknown:
            fld = fld + "_x"
        needs.append(ToolNeed(spec.name, args, (fld,)))
        unknown.append(fld)
        prev_field = fld
    need = " and ".join(f"the {words(f)}" for f in unknown[-1:] if f) or "some information"
    title = f"{chosen[0].name.replace('_', ' ').title()} request"
    return TaskScenario(
        user_profile=rng.choice(PERSONAS),
        known_info=known,
        unknown_info=tuple(unknown),
        user_need=f"I need to find out {need}",
        difficulty=difficulty,
        tools_needed=tuple(needs),
        success_criteria=tuple(f"{f} is obtained from a tool result and reported" for f in unknown),
        title=title,
    )


def task_generator(cfg: SimulationConfig) -> Responder:
    def respond(req: ChatRequest, rng: random.Random) -> str:
        meta = req.metadata
        tools = _specs(meta["tools"])
        scenario = build_scenario(tools, meta.get("difficulty", "easy"), rng)
        obj = scenario.to_json()
        if int(meta.get("step", 0)) == 0 and rng.random() < cfg.invalid_scenario_rate:
            # a classic generator slip: the target also shows up as known
            obj["known_info"][scenario.unknown_info[0]] = "unknown"
        return json.dumps(obj, sort_keys=True)

    return respond


# ---------------------------------------------------------------------------
# Query generator (single-turn)
# ---------------------------------------------------------------------------


def _call_args(spec: ToolSpec, rng: random.Random) -> dict[str, Any]:
    args = {}
    for pname in sorted(spec.parameters):
        if pname in spec.required or rng.random() < 0.3:
            args[pname] = example_value(spec.parameters[pname], rng, pname)
    return args


def _describe_call(spec: ToolSpec, args: Mapping[str, Any]) -> str:
    what = spec.description.rstrip(".") or words(spec.name)
    what = what[0].lower() + what[1:]
    if not args:
        return what
    details = ", ".join(f"{words(k)} {value_text(v)}" for k, v in args.items())
    return f"{what} ({details})"


def query_generator(cfg: SimulationConfig) -> Responder:
    def respond(req: ChatRequest, rng: random.Random) -> str:
        meta = req.metadata
        kind = meta.get("kind", "standard")
        tools = _specs(meta["tools"])
        if kind == "irrelevance":
            return json.dumps({"query": rng.choice(OFF_TOPIC), "tools_needed": []})
        if kind == "parallel":
            picks = [tools[0], tools[1]] if len(tools) > 1 else [tools[0], tools[0]]
        else:
            picks = [tools[0]]
        needs = [{"tool": s.name, "arguments": _call_args(s, rng)} for s in picks]
        asks = [_describe_call(s, n["arguments"]) for s, n in zip(picks, needs)]
        query = "Please " + " and also ".join(asks) + "."
        return json.dumps({"query": query, "tools_needed": needs}, sort_keys=True)

    return respond


# ---------------------------------------------------------------------------
# User simulator
# ---------------------------------------------------------------------------


def _known_groups(scenario: TaskScenario) -> list[list[str]]:
    seen: set[str] = set()
    groups = []
    for need in scenario.tools_needed:
        keys = [v["$known"] for v in need.arguments.values() if is_ref(v) and "$known" in v]
        keys = [k for k in dict.fromkeys(keys) if k not in seen]
        seen.update(keys)
        if keys:
            groups.append(keys)
    return groups


def reveal_schedule(scenario: TaskScenario, rounds: int) -> list[list[str]]:
    """Which known_info keys the user volunteers in each round.

    The last round is the closing request. With spare work rounds the user
    opens vaguely and lets the agent ask.
    """
    groups = _known_groups(scenario)
    work = rounds - 1
    schedule: list[list[str]] = [[] for _ in range(rounds)]
    if work <= 0 or not groups:
        return schedule
    start = 1 if work > len(groups) else 0
    slots = work - start
    for j, g in enumerate(groups):
        schedule[start + min(j, slots - 1)].extend(g)
    return schedule


def _asked_keys(text: str, keys: Sequence[str]) -> list[str]:
    low = text.lower()
    return [k for k in keys if words(k).lower() in low or k.lower() in low]


def clean_user_message(scenario: TaskScenario, turns: Sequence[Turn], round_no: int, rounds: int) -> str:
    if round_no == rounds - 1:
        return "Thanks, that covers it. Could you give me a short summary of what you found?"
    schedule = reveal_schedule(scenario, rounds)
    said = "\n".join(t.content for t in turns if t.role == "user")
    last_agent = next((t.content for t in reversed(turns) if t.role == "assistant" and t.content), "")
    keys = list(schedule[round_no])
    keys += [k for k in _asked_keys(last_agent, list(scenario.known_info)) if k not in keys]
    keys = [k for k in keys if value_text(scenario.known_info[k]) not in said]
    details = "; ".join(f"{words(k)}: {value_text(scenario.known_info[k])}" for k in keys)
    if round_no == 0:
        opener = f"Hi! {scenario.user_need.rstrip('.!? ')}."
        return f"{opener} Here are the details: {details}." if details else f"{opener} Can you help me with that?"
    if details:
        return f"Sure, here you go. {details}."
    return "Great. Is there anything else you need from me before you wrap up?"


def user_simulator(cfg: SimulationConfig) -> Responder:
    def respond(req: ChatRequest, rng: random.Random) -> str:
        meta = req.metadata
        scenario = TaskScenario.from_json(meta["scenario"])
        turns = [Turn.from_json(t) for t in meta.get("turns", [])]
        text = clean_user_message(scenario, turns, int(meta["round"]), int(meta["rounds"]))
        attempt = int(meta.get("reflection_attempt", 0))
        slip = rng.random() < cfg.user_slip_rate if attempt == 0 else rng.random() > cfg.user_fix_rate
        if slip:
            if scenario.unknown_info and rng.random() < 0.5:
                text += f" I think the {words(scenario.unknown_info[0])} is {rng.randint(100, 999)}."
            else:
                text += ' <tool_call>{"name": "lookup", "arguments": {}}</tool_call>'
        return text

    return respond


# ---------------------------------------------------------------------------
# Tool agent
# ---------------------------------------------------------------------------


def completed_counts(turns: Sequence[Turn]) -> Counter:
    done: Counter = Counter()
    for prev, cur in zip(turns, turns[1:]):
        if prev.role == "assistant" and cur.role == "tool":
            for call, res in zip(prev.tool_calls, cur.tool_results):
                if res.status == "ok":
                    done[call.function] += 1
    return done


def pending_needs(scenario: TaskScenario, turns: Sequence[Turn]) -> list[ToolNeed]:
    done = completed_counts(turns)
    seen: Counter = Counter()
    out = []
    for need in scenario.tools_needed:
        seen[need.tool] += 1
        if seen[need.tool] > done[need.tool]:
            out.append(need)
    return out


def _binding_state(need: ToolNeed, scenario: TaskScenario, said: str, resolved: Mapping[str, Any]):
    args: dict[str, Any] = {}
    missing: list[str] = []
    for arg, binding in need.arguments.items():
        if is_ref(binding) and "$known" in binding:
            key = binding["$known"]
            value = scenario.known_info.get(key)
            if value_text(value) in said:
                args[arg] = value
            else:
                missing.append(key)
            continue
        ok, value = resolve_binding(binding, scenario.known_info, resolved)
        if not ok:
            missing.append(binding["$unknown"])
            continue
        if not is_ref(binding) and value_text(value) not in said:
            missing.append(arg)
            continue
        args[arg] = value
    return args, missing


def plan_agent_turn(scenario: TaskScenario, turns: Sequence[Turn], tool_names: Sequence[str]) -> AssistantTurn:
    """What a careful agent would say next."""
    said = "\n".join(t.content for t in turns if t.role == "user")
    resolved = resolved_unknowns(turns, scenario.unknown_info)
    pending = pending_needs(scenario, turns)
    calls, asks = [], []
    for need in pending:
        args, missing = _binding_state(need, scenario, said, resolved)
        if missing:
            asks.extend(m for m in missing if m in scenario.known_info)
        else:
            calls.append(ToolCall(need.tool, args))
    if calls:
        names = ", ".join(c.function for c in calls)
        return AssistantTurn(f"I have everything needed to call {names}.", None, tuple(calls))
    if asks:
        wanted = ", ".join(words(k) for k in dict.fromkeys(asks))
        return AssistantTurn(
            "Some inputs are still missing; I should ask rather than guess.",
            f"To look that up I need a few details. Could you tell me the {wanted}?",
        )
    if not scenario.tools_needed:
        tools = ", ".join(tool_names) or "none"
        return AssistantTurn(
            "None of the available tools fits this request.",
            f"I'm sorry, I can't help with that. My available tools ({tools}) do not cover this kind of request.",
        )
    facts = _result_facts(turns, scenario)
    summary = "; ".join(f"{words(k)}: {value_text(v)}" for k, v in facts.items()) or "the request is complete"
    last = turns[-1] if turns else None
    answered = any(t.role == "assistant" and t.content.startswith("Here is what I found") for t in turns)
    if last is not None and last.role == "user" and answered and "summary" not in last.content.lower():
        return AssistantTurn("Nothing is pending.", "No, that is everything I needed. Let me know if you want a recap.")
    return AssistantTurn("All needed results are in; summarise them for the user.", f"Here is what I found: {summary}.")


def _result_facts(turns: Sequence[Turn], scenario: TaskScenario) -> dict[str, Any]:
    if scenario.unknown_info:
        return resolved_unknowns(turns, scenario.unknown_info)
    facts: dict[str, Any] = {}
    for t in turns:
        for r in t.tool_results:
            body = r.payload.get("result", r.payload) if isinstance(r.payload, Mapping) else {}
            if isinstance(body, Mapping):
                for k in sorted(body):
                    if isinstance(body[k], (str, int, float)) and k not in facts:
                        facts[k] = body[k]
    return dict(list(facts.items())[:4])


def corrupt_calls(calls: Sequence[ToolCall], specs: Mapping[str, ToolSpec], rng: random.Random) -> tuple[ToolCall, ...]:
    """Inject one hallucination into a call list."""
    i = rng.randrange(len(calls))
    call = calls[i]
    spec = specs.get(call.function)
    options = ["rename"]
    if spec is not None and any(a in spec.required for a in call.arguments):
        options.append("drop")
    if call.arguments:
        options.append("retype")
    mode = rng.choice(options)
    args = dict(call.arguments)
    if mode == "rename":
        bad = ToolCall(call.function + "_pro", args, call.id)
    elif mode == "drop":
        victim = rng.choice(sorted(a for a in args if spec and a in spec.required))
        del args[victim]
        bad = ToolCall(call.function, args, call.id)
    else:
        victim = rng.choice(sorted(args))
        args[victim] = 42 if isinstance(args[victim], str) else f"{value_text(args[victim])} units"
        bad = ToolCall(call.function, args, call.id)
    return tuple(bad if j == i else c for j, c in enumerate(calls))


def tool_agent(cfg: SimulationConfig) -> Responder:
    def respond(req: ChatRequest, rng: random.Random) -> str:
        meta = req.metadata
        scenario = TaskScenario.from_json(meta["scenario"])
        turns = [Turn.from_json(t) for t in meta.get("turns", [])]
        specs = {t.name: t for t in req.tools}
        turn = plan_agent_turn(scenario, turns, sorted(specs))
        multi = meta.get("mode") == "multi_turn"
        rate = cfg.multi_hallucination_rate if multi else cfg.single_hallucination_rate
        fix = cfg.multi_fix_rate if multi else cfg.single_fix_rate
        attempt = int(meta.get("reflection_attempt", 0))
        if turn.tool_calls:
            broken = rng.random() < rate if attempt == 0 else rng.random() > fix
            if broken:
                turn = AssistantTurn(turn.think, turn.content, corrupt_calls(turn.tool_calls, specs, rng))
        return render_assistant_output(turn)

    return respond


# ---------------------------------------------------------------------------
# Tool-corpus agents
# ---------------------------------------------------------------------------


def discriminator(cfg: SimulationConfig) -> Responder:
    """Tools with identical parameter-name sets are redundant."""

    def respond(req: ChatRequest, rng: random.Random) -> str:
        specs = _specs(req.metadata["specs"])
        groups: dict[frozenset, list[str]] = {}
        for s in specs:
            groups.setdefault(frozenset(s.parameters), []).append(s.name)
        best = max(groups.values(), key=lambda g: (len(g), [-ord(c) for c in min(g)]))
        redundant = sorted(best) if len(best) > 1 else []
        unique = sorted(s.name for s in specs if s.name not in redundant)
        why = "same parameters, same job" if redundant else "each tool does something different"
        return json.dumps({"redundant": redundant, "unique": unique, "rationale": why})

    return respond


def merger(cfg: SimulationConfig) -> Responder:
    def respond(req: ChatRequest, rng: random.Random) -> str:
        specs = sorted(_specs(req.metadata["specs"]), key=lambda s: s.name)
        params: dict[str, Any] = {}
        for s in specs:
            for k, v in s.parameters.items():
                params.setdefault(k, v.to_json())
        required = set.intersection(*(set(s.required) for s in specs))
        description = max((s.description for s in specs), key=len)
        return json.dumps(
            {"name": specs[0].name, "description": description, "parameters": params, "required": sorted(required)},
            sort_keys=True,
        )

    return respond


def server(cfg: SimulationConfig) -> Responder:
    def respond(req: ChatRequest, rng: random.Random) -> str:
        meta = req.metadata
        spec = parse_tool_spec(meta["spec"])
        call = ToolCall.from_json(meta["call"])
        return json.dumps(template_payload(call, spec, int(meta.get("seed", 0)), meta.get("provides", ())), sort_keys=True)

    return respond


# ---------------------------------------------------------------------------
# Validators, judge, policy
# ---------------------------------------------------------------------------


def review(traj: Trajectory) -> tuple[str, str, list[int]]:
    """(decision, rationale, redundant turn indices) of a strict reviewer."""
    problems = lint_turns(traj.turns) + provenance_violations(traj)
    for t in traj.turns:
        for r in t.tool_results:
            if r.status != "ok":
                problems.append("a tool call failed")
    if traj.scenario is not None and traj.scenario.unknown_info:
        missing = set(traj.scenario.unknown_info) - set(resolved_unknowns(traj.turns, traj.scenario.unknown_info))
        if missing:
            problems.append(f"unresolved: {sorted(missing)}")
    if problems:
        return "reject", problems[0], []
    redundant = [
        i
        for i, (a, b) in enumerate(zip(traj.turns, traj.turns[1:]))
        if a.role == b.role == "assistant" and not a.tool_calls and a.content.strip() == b.content.strip()
    ]
    if redundant:
        return "revise", "a reply is repeated verbatim", redundant
    return "accept", "calls are grounded and the answer uses the results", []


def validator(cfg: SimulationConfig) -> Responder:
    def respond(req: ChatRequest, rng: random.Random) -> str:
        traj = Trajectory.from_json(req.metadata["trajectory"])
        decision, why, redundant = review(traj)
        if decision == "accept" and rng.random() < cfg.validator_noise:
            decision, why = "reject", "the final answer feels thin"
        return json.dumps({"decision": decision, "rationale": why, "redundant_turns": redundant, "rejected_segments": []})

    return respond


def judge(cfg: SimulationConfig) -> Responder:
    def respond(req: ChatRequest, rng: random.Random) -> str:
        reasoning = str(req.metadata.get("reasoning", ""))
        n = len(reasoning.split())
        score = round(min(1.0, 0.4 + n / 40), 4)
        return json.dumps({"score": score})

    return respond


def policy(cfg: SimulationConfig) -> Responder:
    """Rollout policy: reproduces gold with a cell-dependent skill."""

    weak = {tuple(c) for c in cfg.weak_cells}

    def respond(req: ChatRequest, rng: random.Random) -> str:
        meta = req.metadata
        gold = [ToolCall.from_json(c) for c in meta.get("gold", [])]
        cell = tuple(meta.get("cell", ("", "")))
        skill = cfg.weak_skill if cell in weak else cfg.policy_skill
        tools = meta.get("tools", [])
        if rng.random() < skill:
            if not gold:
                return render_assistant_output(
                    AssistantTurn("No tool applies here.", "I'm sorry, none of my tools can help with that.")
                )
            return render_assistant_output(AssistantTurn("Calling the tools the request needs.", None, tuple(gold)))
        return render_assistant_output(_wrong_answer(gold, tools, rng))

    return respond


def _wrong_answer(gold: Sequence[ToolCall], tools: Sequence[str], rng: random.Random) -> AssistantTurn:
    if not gold:
        name = tools[0] if tools else "search"
        return AssistantTurn("Maybe a tool can help.", None, (ToolCall(name, {}),))
    calls = list(gold)
    mode = rng.choice(["drop", "value"] if len(calls) > 1 else ["value", "none"])
    if mode == "drop":
        calls.pop(rng.randrange(len(calls)))
    elif mode == "none":
        return AssistantTurn("I am not sure which tool fits.", "Could you clarify what you need?")
    else:
        i = rng.randrange(len(calls))
        args = dict(calls[i].arguments)
        if args:
            k = rng.choice(sorted(args))
            v = args[k]
            args[k] = (v + 1) if isinstance(v, (int, float)) and not isinstance(v, bool) else f"{v}-x"
        else:
            args["note"] = "extra"
        calls[i] = ToolCall(calls[i].function, args)
    return AssistantTurn("Calling tools.", None, tuple(calls))


AGENTS: dict[str, Callable[[SimulationConfig], Responder]] = {
    "task_generator": task_generator,
    "query_generator": query_generator,
    "user_simulator": user_simulator,
    "tool_agent": tool_agent,
    "discriminator": discriminator,
    "merger": merger,
    "server": server,
    "validator": validator,
    "judge": judge,
    "policy": policy,
}


def simulated_responders(cfg: SimulationConfig | None = None) -> dict[str, Responder]:
    cfg = cfg or SimulationConfig()
    return {name: make(cfg) for name, make in AGENTS.items()}


def simulated_backend(
    seed: int = 0,
    cfg: SimulationConfig | None = None,
    fixtures: Mapping[tuple[str, int, str], str] | None = None,
    embedding_overrides: Mapping[str, Sequence[float]] | None = None,
    embedding_dim: int = 64,
    parallelism: int = 8,
    **kwargs: Any,
) -> ScriptedBackend:
    return ScriptedBackend(
        seed=seed,
        fixtures=fixtures,
        responders=simulated_responders(cfg),
        embedding_overrides=embedding_overrides,
        embedding_dim=embedding_dim,
        parallelism=parallelism,
        **kwargs,
    )
