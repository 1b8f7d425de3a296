import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolforge.reward import (
    GroupRollout,
    GroupTooSmall,
    JudgeFailure,
    LengthMismatch,
    Rollout,
    TauSchedule,
    align_calls,
    clipped_term,
    composite_reward,
    format_reward,
    group_advantages,
    grpo_objective,
    kl_penalty,
    kl_terms,
    parse_score,
    score_text,
    tool_reward,
)
from toolforge.schema import ToolCall, parse_assistant_output

GOOD = '<think>need quote</think><tool_call>{"name":"get_freight_quote","arguments":{"weight":500}}</tool_call>'


def parsed(text):
    return parse_assistant_output(text)


# -- format ----------------------------------------------------------------


def test_format_clean():
    assert format_reward(*parsed(GOOD)) == 1.0


def test_format_missing_think():
    turn, report = parsed('<tool_call>{"name":"f","arguments":{}}</tool_call>')
    assert format_reward(turn, report) == 0.0
    assert format_reward(turn, report, require_think=False) == 1.0


def test_format_bad_call_json():
    turn, report = parsed("<think>x</think><tool_call>{not json}</tool_call>")
    assert report.tags_balanced and format_reward(turn, report) == 0.0


def test_format_two_thinks():
    assert format_reward(*parsed("<think>a</think><think>b</think>hi")) == 0.0


# -- tool ------------------------------------------------------------------


def test_tool_identity():
    gold = [ToolCall("f", {"a": 1, "b": "x"}), ToolCall("g", {})]
    assert tool_reward(gold, gold) == 1.0


def test_tool_partial_arguments():
    gold = [ToolCall("f", {"a": 1, "b": 2})]
    assert tool_reward([ToolCall("f", {"a": 1, "b": 3})], gold) == 0.75


def test_tool_irrelevance():
    assert tool_reward([ToolCall("f", {})], []) == 0.0
    assert tool_reward([], []) == 1.0


def test_tool_type_normalized_comparison():
    gold = [ToolCall("f", {"n": 5, "s": "Shanghai"})]
    assert tool_reward([ToolCall("f", {"n": 5.0, "s": "  Shanghai "})], gold) == 1.0
    assert tool_reward([ToolCall("f", {"n": "5", "s": "Shanghai"})], gold) == 0.75
    assert tool_reward([ToolCall("f", {"n": True, "s": "Shanghai"})], [ToolCall("f", {"n": 1, "s": "Shanghai"})]) == 0.75


def test_tool_extra_calls_penalized():
    gold = [ToolCall("f", {"a": 1}), ToolCall("g", {"b": 2})]
    pred = gold + [ToolCall("h", {})]
    assert tool_reward(pred, gold) == 0.5
    assert tool_reward(pred + [ToolCall("h", {}), ToolCall("h", {})], gold) == 0.0


def test_tool_missing_calls_score_zero_slots():
    gold = [ToolCall("f", {"a": 1}), ToolCall("g", {"b": 2})]
    assert tool_reward(gold[:1], gold) == 0.5


def test_align_parallel_calls():
    gold = [ToolCall("f", {"a": 1}), ToolCall("g", {"b": 2})]
    pred = [ToolCall("g", {"b": 2}), ToolCall("f", {"a": 1})]
    assert tool_reward(pred, gold) == 0.0
    assert tool_reward(align_calls(pred, gold), gold) == 1.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.sampled_from("fgh"), st.dictionaries(st.sampled_from("abc"), st.integers(0, 2))), max_size=4),
    st.lists(st.tuples(st.sampled_from("fgh"), st.dictionaries(st.sampled_from("abc"), st.integers(0, 2))), max_size=4),
)
def test_tool_reward_bounded(pred, gold):
    value = tool_reward([ToolCall(*p) for p in pred], [ToolCall(*g) for g in gold])
    assert 0.0 <= value <= 1.0


# -- composite -------------------------------------------------------------


def breakdown_for(tool, tau, alpha, teacher, fmt=1.0):
    # Build the breakdown through composite_reward with a calibrated gold set.
    gold_n = 100
    hits = round(tool * gold_n)
    gold = [ToolCall(f"f{i}", {}) for i in range(gold_n)]
    pred = gold[:hits]
    text = "<think>r</think>" + "".join(f'<tool_call>{{"name":"{c.function}","arguments":{{}}}}</tool_call>' for c in pred)
    if fmt == 0.0:
        text = text.replace("<think>r</think>", "")
    return composite_reward([parsed(text)], gold, tau, alpha, teacher)


def test_gate_closed():
    b = breakdown_for(0.4, 0.5, 0.5, 1.0)
    assert b.tool == pytest.approx(0.4) and not b.gate_open
    assert b.total == pytest.approx(1.4)


def test_gate_open():
    b = breakdown_for(0.9, 0.5, 0.5, 0.8)
    assert b.gate_open and b.total == pytest.approx(2.3)


def test_gate_boundary_is_strict():
    b = breakdown_for(0.5, 0.5, 0.5, 1.0)
    assert b.tool == 0.5 and not b.gate_open and b.total == 1.5


def test_judge_runs_only_when_gate_open():
    calls = []

    def judge(reasoning):
        calls.append(reasoning)
        return 1.0

    closed = composite_reward([parsed(GOOD)], [ToolCall("other", {})], 0.5, 0.5, judge)
    assert not calls and closed.teacher_raw == 0.0
    opened = composite_reward([parsed(GOOD)], [ToolCall("get_freight_quote", {"weight": 500})], 0.5, 0.5, judge)
    assert calls == ["need quote"] and opened.total == 2.5


def test_judge_failure_scores_zero_and_flags():
    def judge(_):
        raise JudgeFailure("down")

    b = composite_reward([parsed(GOOD)], [ToolCall("get_freight_quote", {"weight": 500})], 0.5, 0.5, judge)
    assert b.gate_open and b.judge_failed and b.teacher_raw == 0.0 and b.total == 2.0


def test_gate_monotonicity():
    gold = [ToolCall("get_freight_quote", {"weight": 500})]
    totals_open = [composite_reward([parsed(GOOD)], gold, 0.5, 0.5, t).total for t in (0.0, 0.5, 1.0)]
    assert totals_open == sorted(totals_open) and totals_open[0] < totals_open[-1]
    totals_closed = [composite_reward([parsed(GOOD)], gold, 1.0, 0.5, t).total for t in (0.0, 0.5, 1.0)]
    assert len(set(totals_closed)) == 1


def test_score_text_and_parse_score():
    b = score_text(GOOD, [ToolCall("get_freight_quote", {"weight": 500})], 0.5, 0.5, 0.6)
    assert b.total == pytest.approx(2.3)
    assert parse_score('{"score": 0.7}') == 0.7
    assert parse_score("I would say 0.4 overall") == 0.4
    with pytest.raises(JudgeFailure):
        parse_score("no idea")


def test_tau_schedule():
    sched = TauSchedule(0.5, ((3, 0.7), (1, 0.6)))
    assert [sched.at(r) for r in (0, 1, 2, 3, 9)] == [0.5, 0.6, 0.6, 0.7, 0.7]


# -- GRPO ------------------------------------------------------------------


def test_advantages_examples():
    assert group_advantages([2, 0]) == [1.0, -1.0]
    assert group_advantages([1, 1, 1]) == [0.0, 0.0, 0.0]
    assert group_advantages([1, 0, 1, 0]) == [1.0, -1.0, 1.0, -1.0]
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=12), st.randoms(use_true_random=False))
def test_advantages_permute_with_group(rewards, rnd):
    perm = list(range(len(rewards)))
    rnd.shuffle(perm)
    adv = group_advantages(rewards)
    shuffled = group_advantages([rewards[i] for i in perm])
    assert shuffled == pytest.approx([adv[i] for i in perm], abs=1e-9)


def test_clipped_term_examples():
    assert clipped_term(1.0, 0.37, 0.2) == 0.37
    assert clipped_term(1.5, 1.0, 0.2) == 1.2
    assert clipped_term(0.5, -1.0, 0.2) == -0.8


@settings(max_examples=300, deadline=None)
@given(st.floats(0.01, 10), st.floats(-10, 10), st.floats(0.01, 0.99))
def test_clip_envelope(rho, adv, eps):
    term = clipped_term(rho, adv, eps)
    assert term <= rho * adv + 1e-12
    if 1 - eps <= rho <= 1 + eps:
        assert term == rho * adv


def test_kl_examples():
    assert kl_penalty([-1.0, -2.0], [-1.0, -2.0]) == 0.0
    assert kl_penalty([0.0, 0.0], [math.log(2)] * 2) == pytest.approx(2 - math.log(2) - 1, abs=1e-12)
    assert kl_penalty([0.5], [0.0]) == pytest.approx(math.exp(-0.5) + 0.5 - 1, abs=1e-12)
    with pytest.raises(LengthMismatch):
        kl_terms([0.0], [])


def rollout(reward, rho=1.0, n=3):
    theta = tuple([math.log(rho) / n] * n)
    return Rollout("x", reward, theta, (0.0,) * n, theta)


def test_objective_on_policy_is_zero():
    group = GroupRollout("q", (rollout(2), rollout(0), rollout(1)))
    assert grpo_objective(group, 0.2, 0.0).objective == pytest.approx(0.0, abs=1e-12)


def test_objective_worked_example():
    group = GroupRollout("q", (rollout(2, 1.5), rollout(0, 0.5)))
    diag = grpo_objective(group, 0.2, 0.0)
    assert diag.advantages == [1.0, -1.0]
    assert diag.ratios == pytest.approx([1.5, 0.5])
    assert diag.objective == pytest.approx(0.2)
    assert diag.clip_active == [True, True]


def test_objective_kl_free_when_ref_matches():
    group = GroupRollout("q", (rollout(2, 1.5), rollout(0, 0.5)))
    assert grpo_objective(group, 0.2, 100.0).objective == pytest.approx(0.2)


def test_objective_kl_penalizes():
    r = Rollout("x", 1.0, (0.0,), (0.0,), (math.log(2),))
    group = GroupRollout("q", (r, Rollout("y", 0.0, (0.0,), (0.0,), (0.0,))))
    diag = grpo_objective(group, 0.2, 1.0)
    assert diag.kl == pytest.approx((2 - math.log(2) - 1) / 2)
    assert diag.objective == pytest.approx(-diag.kl)


def test_group_stream_lengths_checked():
    with pytest.raises(LengthMismatch):
        GroupRollout("q", (Rollout("x", 0, (0.0,), (), (0.0,)),))


def test_kl_nonnegative_random():
    rng = random.Random(0)
    deltas = [rng.uniform(-20, 20) for _ in range(1000)]
    assert min(kl_terms([0.0] * 1000, deltas)) >= 0.0
