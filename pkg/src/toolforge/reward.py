"""Gated composite reward and GRPO group quantities.

The composite reward is ``format + tool + [tool > tau] * alpha * teacher``;
the teacher (reasoning-quality judge) is consulted only when the gate is
already open. Group math follows GRPO: group-normalised advantages, a
sequence-level importance ratio, the clipped surrogate, and a per-token
``exp(d) - d - 1`` KL estimate against the reference policy.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .schema import AssistantTurn, ParseReport, ToolCall, parse_assistant_output

logger = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12


class GroupTooSmall(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class JudgeFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    tool: float
    teacher_raw: float
    gate_open: bool
    alpha: float
    tau: float
    total: float
    judge_failed: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "format": self.format,
            "tool": self.tool,
            "teacher_raw": self.teacher_raw,
            "gate_open": self.gate_open,
            "alpha": self.alpha,
            "tau": self.tau,
            "total": self.total,
            "judge_failed": self.judge_failed,
        }


# ---------------------------------------------------------------------------
# Component rewards
# ---------------------------------------------------------------------------


def format_reward(turn: AssistantTurn, report: ParseReport, require_think: bool = True) -> float:
    if not report.tags_balanced or report.invalid_call_json:
        return 0.0
    if require_think and report.think_count != 1:
        return 0.0
    if report.think_count > 1:
        return 0.0
    return 1.0


def normalize_value(value: Any) -> Any:
    """Comparison form: numbers unify int/float, strings are trimmed."""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, (int, float)):
        return ("num", float(value))
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, Mapping):
        return tuple(sorted((str(k), normalize_value(v)) for k, v in value.items()))
    if isinstance(value, (list, tuple)):
        return ("list", tuple(normalize_value(v) for v in value))
    return value


def values_match(a: Any, b: Any) -> bool:
    if isinstance(a, bool) != isinstance(b, bool):
        return False
    return normalize_value(a) == normalize_value(b)


def call_score(pred: ToolCall, gold: ToolCall) -> float:
    name = 0.5 if pred.function == gold.function else 0.0
    gold_args = dict(gold.arguments)
    if not gold_args:
        return name + 0.5
    pred_args = pred.arguments if isinstance(pred.arguments, Mapping) else {}
    matched = sum(1 for k, v in gold_args.items() if k in pred_args and values_match(pred_args[k], v))
    return name + 0.5 * matched / len(gold_args)


def tool_reward(pred: Sequence[ToolCall], gold: Sequence[ToolCall]) -> float:
    """Positional execution-fidelity score in [0, 1]."""
    if not gold:
        return 1.0 if not pred else 0.0
    n = len(gold)
    total = sum(call_score(p, g) for p, g in zip(pred, gold)) / n
    extra = max(0, len(pred) - n)
    return max(0.0, total - extra / n)


def align_calls(pred: Sequence[ToolCall], gold: Sequence[ToolCall]) -> list[ToolCall]:
    """Reorder ``pred`` so each gold slot faces its best-scoring prediction.

    Greedy, stable on ties; unmatched predictions trail the aligned prefix.
    Used for parallel calls where order carries no meaning.
    """
    remaining = list(pred)
    aligned: list[ToolCall] = []
    for g in gold:
        if not remaining:
            break
        best = max(range(len(remaining)), key=lambda i: (call_score(remaining[i], g), -i))
        aligned.append(remaining.pop(best))
    return aligned + remaining


def teacher_input(turns: Sequence[AssistantTurn]) -> str:
    """The reasoning judged by the teacher: all think blocks, in order."""
    return "\n\n".join(t.think for t in turns if t.think)


def composite_reward(
    turns: Sequence[tuple[AssistantTurn, ParseReport]],
    gold: Sequence[ToolCall],
    tau: float,
    alpha: float,
    teacher: float | Callable[[str], float],
    require_think: bool = True,
    align: bool = False,
) -> RewardBreakdown:
    """Score a response (one or more assistant turns) against gold calls.

    ``teacher`` is either a precomputed score in [0, 1] or a judge callable
    taking the concatenated reasoning; the callable runs only when the gate
    is open. A failing judge scores 0 and is flagged.
    """
    if not 0 <= tau <= 1:
        raise ValueError("tau must lie in [0, 1]")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if turns:
        fmt = sum(format_reward(t, r, require_think) for t, r in turns) / len(turns)
    else:
        fmt = 0.0
    pred = [c for t, _ in turns for c in t.tool_calls]
    if align:
        pred = align_calls(pred, gold)
    tool = tool_reward(pred, gold)
    gate = tool > tau
    teacher_raw = 0.0
    failed = False
    if callable(teacher):
        if gate:
            try:
                teacher_raw = float(teacher(teacher_input([t for t, _ in turns])))
                if not 0 <= teacher_raw <= 1:
                    raise JudgeFailure(f"teacher score {teacher_raw} outside [0, 1]")
            except Exception as exc:  # noqa: BLE001 - any judge fault scores zero
                logger.warning("teacher judge failed: %s", exc)
                teacher_raw, failed = 0.0, True
    else:
        teacher_raw = float(teacher)
        if not 0 <= teacher_raw <= 1:
            raise ValueError("teacher score must lie in [0, 1]")
    total = fmt + tool + (alpha * teacher_raw if gate else 0.0)
    return RewardBreakdown(fmt, tool, teacher_raw, gate, alpha, tau, total, failed)


_SCORE_RE = re.compile(r"-?\d+(?:\.\d+)?")


def parse_score(text: str) -> float:
    """Teacher score from a judge reply: a JSON ``score`` or the first number."""
    try:
        obj = json.loads(text)
        if isinstance(obj, Mapping) and "score" in obj:
            return float(obj["score"])
    except (json.JSONDecodeError, TypeError, ValueError):
        pass
    m = _SCORE_RE.search(text)
    if m is None:
        raise JudgeFailure("judge reply carries no score")
    return float(m.group(0))


def score_text(
    text: str,
    gold: Sequence[ToolCall],
    tau: float,
    alpha: float,
    teacher: float | Callable[[str], float],
    require_think: bool = True,
) -> RewardBreakdown:
    turn, report = parse_assistant_output(text)
    return composite_reward([(turn, report)], gold, tau, alpha, teacher, require_think, align=True)


# ---------------------------------------------------------------------------
# GRPO
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rollout:
    text: str
    reward: float
    logp_theta: tuple[float, ...] = ()
    logp_old: tuple[float, ...] = ()
    logp_ref: tuple[float, ...] = ()


@dataclass(frozen=True)
class GroupRollout:
    query_id: str
    responses: tuple[Rollout, ...]

    def __post_init__(self) -> None:
        for r in self.responses:
            if not (len(r.logp_theta) == len(r.logp_old) == len(r.logp_ref)):
                raise LengthMismatch(f"{self.query_id}: log-prob streams differ in length")


@dataclass
class GroupDiagnostics:
    objective: float
    kl: float
    rewards: list[float]
    advantages: list[float]
    ratios: list[float]
    surrogate: list[float]
    clip_active: list[bool] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "objective": self.objective,
            "kl": self.kl,
            "rewards": self.rewards,
            "advantages": self.advantages,
            "ratios": self.ratios,
            "surrogate": self.surrogate,
            "clip_active": self.clip_active,
        }


def group_advantages(rewards: Sequence[float]) -> list[float]:
    g = len(rewards)
    if g < 2:
        raise GroupTooSmall(f"group of {g} cannot be normalised")
    mean = math.fsum(rewards) / g
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / g)
    if std < DEGENERATE_STD:
        return [0.0] * g
    return [(r - mean) / std for r in rewards]


def clip(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def clipped_term(rho: float, advantage: float, eps: float) -> float:
    return min(rho * advantage, clip(rho, 1 - eps, 1 + eps) * advantage)


def kl_terms(logp_theta: Sequence[float], logp_ref: Sequence[float]) -> list[float]:
    if len(logp_theta) != len(logp_ref):
        raise LengthMismatch(f"{len(logp_theta)} vs {len(logp_ref)} tokens")
    # expm1(d) - d == exp(d) - d - 1 without cancellation near zero
    return [max(0.0, math.expm1(r - t) - (r - t)) for t, r in zip(logp_theta, logp_ref)]


def kl_penalty(logp_theta: Sequence[float], logp_ref: Sequence[float]) -> float:
    terms = kl_terms(logp_theta, logp_ref)
    return math.fsum(terms) / len(terms) if terms else 0.0


def grpo_objective(group: GroupRollout, eps: float, beta: float) -> GroupDiagnostics:
    rewards = [r.reward for r in group.responses]
    adv = group_advantages(rewards)
    ratios, surrogate, active = [], [], []
    for r, a in zip(group.responses, adv):
        rho = math.exp(math.fsum(r.logp_theta) - math.fsum(r.logp_old))
        term = clipped_term(rho, a, eps)
        ratios.append(rho)
        surrogate.append(term)
        active.append(term != rho * a)
    kl = math.fsum(kl_penalty(r.logp_theta, r.logp_ref) for r in group.responses) / len(group.responses)
    objective = math.fsum(surrogate) / len(surrogate) - beta * kl
    return GroupDiagnostics(objective, kl, rewards, adv, ratios, surrogate, active)


@dataclass(frozen=True)
class TauSchedule:
    """Piecewise-constant gate threshold: ``steps`` maps first round -> tau."""

    default: float = 0.5
    steps: tuple[tuple[int, float], ...] = ()

    def at(self, round_no: int) -> float:
        tau = self.default
        for start, value in sorted(self.steps):
            if round_no >= start:
                tau = value
        return tau
