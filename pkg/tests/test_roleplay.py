import json

import pytest

from helpers import FREIGHT_SCENARIO
from toolforge.backend import ScriptedBackend
from toolforge.roleplay import (
    GenerationInvalid,
    SynthContext,
    UnresolvedInformation,
    generate_task,
    run_roleplay,
    synth_single_turn,
)
from toolforge.schema import AssistantTurn, ToolCall, render_assistant_output, validate_against
from toolforge.simulated import SimulationConfig, simulated_backend, simulated_responders
from toolforge.trajectory import (
    ScenarioInvalid,
    TaskScenario,
    ToolNeed,
    Turn,
    check_scenario,
    find_field,
    lint_trajectory,
    provenance_violations,
)

CLEAN = SimulationConfig(
    single_hallucination_rate=0.0, multi_hallucination_rate=0.0, user_slip_rate=0.0, invalid_scenario_rate=0.0
)

def ctx_for(tools12_map, cfg=CLEAN, seed=0, backend=None, **kw):
    return SynthContext(backend or simulated_backend(seed, cfg), tools12_map, seed=seed, **kw)


# -- scenarios -------------------------------------------------------------


def test_freight_scenario_is_valid(tools12_map):
    check_scenario(FREIGHT_SCENARIO, tools12_map)
    again = TaskScenario.from_json(json.loads(json.dumps(FREIGHT_SCENARIO.to_json())))
    assert again == FREIGHT_SCENARIO


def test_nested_task_data_layout():
    raw = {
        "user_profile": "coordinator",
        "known_info": {"shipment_weight": 500},
        "unknown_info": ["freight_cost_estimate"],
        "task_data": {"user_goal": "ship it", "difficulty": "easy", "tools_needed": [{"name": "get_freight_quote"}]},
    }
    scenario = TaskScenario.from_json(raw)
    assert scenario.user_need == "ship it" and scenario.tools_needed[0].tool == "get_freight_quote"


@pytest.mark.parametrize(
    "change, fragment",
    [
        ({"unknown_info": ("shipment_weight", "freight_cost_estimate")}, "both known and unknown"),
        ({"tools_needed": ()}, "tools_needed is empty"),
        ({"tools_needed": (ToolNeed("get_freight_quote", {"weight_kg": 1}),)}, "not in schema"),
        ({"tools_needed": (ToolNeed("teleport"),)}, "not in the toolset"),
        ({"difficulty": "brutal"}, "difficulty"),
    ],
)
def test_scenario_invariants(tools12_map, change, fragment):
    from dataclasses import replace

    with pytest.raises(ScenarioInvalid, match=fragment):
        check_scenario(replace(FREIGHT_SCENARIO, **change), tools12_map)


def test_generate_task_for_weather(tools12_map):
    tools = [tools12_map["get_weather"]]
    scenario = generate_task(tools, "easy", simulated_backend(0, CLEAN))
    assert check_scenario(scenario, {"get_weather": tools[0]}) is scenario
    for need in scenario.tools_needed:
        assert set(need.arguments) <= set(tools12_map[need.tool].parameters)


def test_generate_task_retries_on_overlap(tools12_map):
    tools = [tools12_map["get_weather"]]
    bad = json.dumps(dict(FREIGHT_SCENARIO.to_json(), unknown_info=["shipment_weight"]))
    backend = simulated_backend(0, CLEAN, fixtures={("task_generator", 0, "get_weather"): bad})
    seen = []
    inner = backend.chat

    def spy(request):
        seen.append(request.metadata["feedback"])
        return inner(request)

    backend.chat = spy
    scenario = generate_task(tools, "easy", backend)
    assert scenario.tools_needed and len(seen) == 2 and "both known and unknown" in seen[1][0]


def test_generate_task_gives_up(tools12_map):
    backend = ScriptedBackend(responders={"task_generator": lambda r, rng: "{}"})
    with pytest.raises(ScenarioInvalid):
        generate_task([tools12_map["get_weather"]], "easy", backend, max_attempts=2)


# -- multi-turn ------------------------------------------------------------


def test_freight_roleplay(tools12_map):
    traj = run_roleplay(FREIGHT_SCENARIO, ["get_freight_quote"], 3, ctx_for(tools12_map), "freight")
    assert traj.qa.status == "ok", traj.qa.failure
    assert traj.user_rounds() == 3
    assert lint_trajectory(traj, tools12_map, (3, 5)) == []
    assert provenance_violations(traj) == []
    results = [r.payload for t in traj.turns if t.role == "tool" for r in t.tool_results]
    found = [find_field(p, "freight_cost_estimate") for p in results]
    cost = next(v for ok, v in found if ok)
    assert isinstance(cost, (int, float))
    answers = [t.content for t in traj.turns if t.role == "assistant" and t.content]
    assert any(str(cost) in a for a in answers)
    assert [c.function for c in traj.gold] == ["get_freight_quote"]
    assert traj.turns[-1].role == "assistant" and not traj.turns[-1].tool_calls


def test_roleplay_without_unknowns(tools12_map):
    scenario = TaskScenario(
        "traveller", {"city": "Lima"}, (), "Check the weather.", "easy", (ToolNeed("get_weather", {"city": {"$known": "city"}}),)
    )
    traj = run_roleplay(scenario, ["get_weather"], 3, ctx_for(tools12_map))
    assert traj.qa.status == "ok" and traj.user_rounds() == 3
    assert lint_trajectory(traj, tools12_map) == []


def test_roleplay_rejects_bad_round_budget(tools12_map):
    with pytest.raises(ValueError):
        run_roleplay(FREIGHT_SCENARIO, ["get_freight_quote"], 6, ctx_for(tools12_map))


CHAINED = TaskScenario(
    "coordinator",
    {"shipment_weight": 500, "source": "Shanghai", "destination": "Rotterdam", "cargo_type": "frozen"},
    ("quote_id",),
    "Get a quote and then track the shipment under it.",
    "medium",
    (
        ToolNeed("get_freight_quote", {k: {"$known": k} for k in ("shipment_weight", "source", "destination", "cargo_type")}, ("quote_id",)),
        ToolNeed("track_package", {"tracking_number": {"$unknown": "quote_id"}}),
    ),
)


FIXES = SimulationConfig(
    single_hallucination_rate=0.0, multi_hallucination_rate=0.0, user_slip_rate=0.0, multi_fix_rate=1.0
)


def eager_agent(guess_once=True):
    """Tool agent that guesses the chained id before the quote arrives."""
    base = simulated_responders(FIXES)["tool_agent"]
    done = []

    def respond(request, rng):
        meta = request.metadata
        has_results = any(t["role"] == "tool" for t in meta["turns"])
        text = base(request, rng)
        if has_results or (guess_once and meta.get("reflection_attempt", 0) > 0):
            return text
        if "get_freight_quote" not in text:
            return text
        done.append(1)
        turn = AssistantTurn("Call both at once.", None, (
            ToolCall("get_freight_quote", {"shipment_weight": 500, "source": "Shanghai", "destination": "Rotterdam", "cargo_type": "frozen"}),
            ToolCall("track_package", {"tracking_number": "Q-GUESS"}),
        ))
        return render_assistant_output(turn)

    return respond, done


def test_dependency_violation_goes_to_reflection(tools12_map):
    respond, done = eager_agent()
    responders = simulated_responders(CLEAN)
    responders["tool_agent"] = respond
    ctx = ctx_for(tools12_map, backend=ScriptedBackend(responders=responders))
    traj = run_roleplay(CHAINED, ["get_freight_quote", "track_package"], 3, ctx)
    assert done, "the eager guess never fired"
    assert traj.qa.status == "ok", traj.qa.failure
    assert traj.qa.hallucinations >= 1 and traj.qa.hallucinations_resolved == traj.qa.hallucinations
    assert provenance_violations(traj) == []
    order = [c.function for c in traj.gold]
    assert order.index("get_freight_quote") < order.index("track_package")


def test_persistent_dependency_violation_fails(tools12_map):
    respond, _ = eager_agent(guess_once=False)
    responders = simulated_responders(CLEAN)
    responders["tool_agent"] = respond
    ctx = ctx_for(tools12_map, backend=ScriptedBackend(responders=responders))
    traj = run_roleplay(CHAINED, ["get_freight_quote", "track_package"], 3, ctx)
    assert traj.qa.status == "failed" and traj.gold == []
    assert traj.qa.hallucinations >= 1 and traj.qa.hallucinations_resolved < traj.qa.hallucinations


def test_unresolved_information_flags_failure(tools12_map):
    # the agent only ever talks, so the unknown never gets resolved
    responders = simulated_responders(CLEAN)
    responders["tool_agent"] = lambda r, rng: "Let me think about that."
    ctx = ctx_for(tools12_map, backend=ScriptedBackend(responders=responders))
    traj = run_roleplay(FREIGHT_SCENARIO, ["get_freight_quote"], 3, ctx)
    assert traj.qa.status == "failed" and UnresolvedInformation.__name__ in traj.qa.failure


def test_roleplay_is_deterministic(tools12_map):
    a = run_roleplay(FREIGHT_SCENARIO, ["get_freight_quote"], 4, ctx_for(tools12_map, SimulationConfig(), seed=5))
    b = run_roleplay(FREIGHT_SCENARIO, ["get_freight_quote"], 4, ctx_for(tools12_map, SimulationConfig(), seed=5))
    assert a.to_line() == b.to_line()


# -- single-turn -----------------------------------------------------------


def test_standard_shape(tools12_map):
    traj = synth_single_turn("standard", ["get_freight_quote"], ctx_for(tools12_map))
    assert [t.role for t in traj.turns] == ["user", "assistant", "tool", "assistant"]
    assert len(traj.turns[1].tool_calls) == 1 and len(traj.gold) == 1
    assert validate_against(traj.gold[0], tools12_map).ok
    assert traj.category == "single_standard" and lint_trajectory(traj, tools12_map) == []


def test_parallel_calls_share_a_turn(tools12_map):
    traj = synth_single_turn("parallel", ["get_weather", "get_stock_price"], ctx_for(tools12_map))
    calling = [t for t in traj.turns if t.tool_calls]
    assert len(calling) == 1 and len(calling[0].tool_calls) == 2
    assert all(validate_against(c, tools12_map).ok for c in calling[0].tool_calls)
    assert lint_trajectory(traj, tools12_map) == []


def test_irrelevance_fixture(tools12_map):
    query = json.dumps({"query": "Please translate this poem into French.", "tools_needed": []})
    backend = simulated_backend(0, CLEAN, fixtures={("query_generator", 0, "irrelevance:get_weather"): query})
    traj = synth_single_turn("irrelevance", ["get_weather"], ctx_for(tools12_map, backend=backend))
    assert traj.gold == [] and traj.calls() == []
    assert traj.turns[0].content == "Please translate this poem into French."
    assert traj.turns[-1].role == "assistant" and "get_weather" in traj.turns[-1].content


def test_single_turn_retries_then_raises(tools12_map):
    backend = ScriptedBackend(responders={"query_generator": lambda r, rng: "not json"})
    with pytest.raises(GenerationInvalid) as info:
        synth_single_turn("standard", ["get_weather"], ctx_for(tools12_map, backend=backend))
    assert info.value.trajectory is not None and info.value.trajectory.qa.status == "failed"


def test_wrong_call_count_is_regenerated(tools12_map):
    two = json.dumps({"query": "Weather in Lima and Osaka", "tools_needed": [
        {"tool": "get_weather", "arguments": {"city": "Lima"}}, {"tool": "get_weather", "arguments": {"city": "Osaka"}}]})
    backend = simulated_backend(0, CLEAN, fixtures={("query_generator", 0, "standard:get_weather"): two})
    traj = synth_single_turn("standard", ["get_weather"], ctx_for(tools12_map, backend=backend))
    assert len(traj.gold) == 1


def test_parallel_needs_two_tools(tools12_map):
    with pytest.raises(ValueError):
        synth_single_turn("parallel", ["get_weather"], ctx_for(tools12_map))
    with pytest.raises(ValueError):
        synth_single_turn("multi", ["get_weather"], ctx_for(tools12_map))


def test_hallucinations_are_counted(tools12_map):
    cfg = SimulationConfig(single_hallucination_rate=1.0, single_fix_rate=1.0)
    traj = synth_single_turn("standard", ["get_weather"], ctx_for(tools12_map, cfg))
    assert traj.qa.hallucinations == 1 and traj.qa.hallucinations_resolved == 1
    assert traj.qa.reflection_attempts == 2
    assert validate_against(traj.gold[0], tools12_map).ok


def test_user_turns_carry_no_tool_syntax(tools12_map):
    traj = run_roleplay(FREIGHT_SCENARIO, ["get_freight_quote"], 5, ctx_for(tools12_map, SimulationConfig(user_slip_rate=1.0, user_fix_rate=1.0)))
    assert traj.qa.status == "ok"
    assert all("<tool_call>" not in t.content for t in traj.turns if t.role == "user")
    # every slip is caught and fixed; slips naming an already-resolved value are legal
    assert traj.qa.hallucinations >= 1
    assert traj.qa.hallucinations_resolved == traj.qa.hallucinations
    assert isinstance(traj.turns[0], Turn)
