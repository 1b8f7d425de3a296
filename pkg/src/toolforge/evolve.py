"""The self-evolution loop: synthesize, filter, score consistency, stratify,
export, and plan the next batch around the hard cells."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .backend import Backend, ChatRequest, Message
from .config import PipelineConfig
from .quality import (
    HallucinationLedger,
    PruneBreaksAlternation,
    apply_verdict,
    backend_validators,
    consensus_validate,
    prune_rejections,
)
from .reward import GroupTooSmall, group_advantages, parse_score, score_text, tool_reward, align_calls
from .roleplay import AGENT_PROMPT, GenerationInvalid, SynthContext, generate_task, run_roleplay, synth_single_turn
from .schema import ToolCall, ToolSpec, parse_assistant_output, render_toolset_prompt
from .trajectory import (
    CATEGORIES,
    ScenarioInvalid,
    Trajectory,
    lint_trajectory,
    provenance_violations,
    read_jsonl,
    write_jsonl,
)

logger = logging.getLogger(__name__)

Cell = tuple[str, str]


class MissingRecord(KeyError):
    pass


def _seed(*parts: Any) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()[:8], "big")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Consistency and stratification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConsistencyRecord:
    query_id: str
    g: int
    matches: int

    def __post_init__(self) -> None:
        if not 0 <= self.matches <= self.g:
            raise ValueError("matches must lie in [0, G]")

    @property
    def c(self) -> float:
        return self.matches / self.g

    def to_json(self) -> dict[str, Any]:
        return {"query_id": self.query_id, "g": self.g, "matches": self.matches, "c": self.c}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ConsistencyRecord:
        return cls(str(obj["query_id"]), int(obj["g"]), int(obj["matches"]))


def exact_match(text: str, gold: Sequence[ToolCall]) -> bool:
    turn, report = parse_assistant_output(text)
    if not report.ok:
        return False
    return tool_reward(align_calls(turn.tool_calls, gold), gold) == 1.0


def consistency_score(query_id: str, gold: Sequence[ToolCall], rollouts: Sequence[str]) -> ConsistencyRecord:
    """Fraction of rollouts reproducing gold exactly; parse failures count as misses."""
    if len(rollouts) < 2:
        raise GroupTooSmall("consistency needs at least two rollouts")
    return ConsistencyRecord(query_id, len(rollouts), sum(exact_match(r, gold) for r in rollouts))


def stratify(
    samples: Sequence[Trajectory], records: Mapping[str, ConsistencyRecord], gamma: float
) -> tuple[list[Trajectory], list[Trajectory]]:
    """Split into (easy, hard); hard means c < gamma, so c == gamma is easy."""
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    easy, hard = [], []
    for s in samples:
        rec = records.get(s.id)
        if rec is None:
            raise MissingRecord(s.id)
        (hard if rec.c < gamma else easy).append(s)
    return easy, hard


# ---------------------------------------------------------------------------
# Injection planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanCell:
    tool: str
    category: str
    weight: float
    target: int

    def to_json(self) -> dict[str, Any]:
        return {"tool": self.tool, "category": self.category, "weight": self.weight, "target": self.target}


@dataclass(frozen=True)
class InjectionPlan:
    batch_size: int
    cells: tuple[PlanCell, ...]
    uniform: bool = False

    def to_json(self) -> dict[str, Any]:
        return {"batch_size": self.batch_size, "uniform": self.uniform, "cells": [c.to_json() for c in self.cells]}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> InjectionPlan:
        cells = tuple(PlanCell(c["tool"], c["category"], float(c["weight"]), int(c["target"])) for c in obj["cells"])
        return cls(int(obj["batch_size"]), cells, bool(obj.get("uniform", False)))

    def targets(self) -> dict[Cell, int]:
        return {(c.tool, c.category): c.target for c in self.cells}

    def jobs(self) -> list[tuple[Cell, int]]:
        return [((c.tool, c.category), k) for c in self.cells for k in range(c.target)]


def largest_remainder(weights: Sequence[float], total: int, tiebreak: Sequence[int] | None = None) -> list[int]:
    """Integer shares of ``total`` proportional to ``weights``; sums exactly."""
    if total < 0:
        raise ValueError("total must be non-negative")
    s = sum(weights)
    if not weights or s <= 0:
        raise ValueError("weights must have a positive sum")
    quotas = [w * total / s for w in weights]
    base = [int(q) for q in quotas]
    order = tiebreak if tiebreak is not None else range(len(weights))
    rank = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - base[i]), order[i]))
    for i in rank[: total - sum(base)]:
        base[i] += 1
    return base


def cell_of(traj: Trajectory) -> Cell:
    tool = traj.qa.tools[0] if traj.qa.tools else (traj.gold[0].function if traj.gold else "")
    return tool, traj.category


def plan_injection(
    hard: Iterable[Trajectory], batch_size: int, universe: Sequence[Cell], seed: int = 0
) -> InjectionPlan:
    """Spread the next batch over cells in proportion to hard-set frequency.

    An empty hard set gives a uniform plan over ``universe``; ties in the
    rounding go to a seeded shuffle of the cells so no tool is favoured
    just by its name.
    """
    counts: dict[Cell, int] = {}
    for t in hard:
        cell = cell_of(t)
        counts[cell] = counts.get(cell, 0) + 1
    uniform = not counts
    if uniform:
        cells = sorted(set(universe))
        if not cells:
            return InjectionPlan(batch_size, (), True)
        weights = [1.0] * len(cells)
    else:
        cells = sorted(counts)
        weights = [float(counts[c]) for c in cells]
    tiebreak = [_seed(seed, *c) for c in cells]
    targets = largest_remainder(weights, batch_size, tiebreak)
    total = sum(weights)
    return InjectionPlan(
        batch_size,
        tuple(PlanCell(c[0], c[1], w / total, n) for c, w, n in zip(cells, weights, targets)),
        uniform,
    )


def plan_universe(tools: Sequence[str], categories: Sequence[str]) -> list[Cell]:
    cats = [c for c in categories if c != "single_parallel" or len(tools) >= 2]
    return [(t, c) for t in sorted(tools) for c in cats]


# ---------------------------------------------------------------------------
# Stage helpers
# ---------------------------------------------------------------------------


@dataclass
class JobResult:
    trajectory: Trajectory | None
    outcome: str  # ok | failed | scenario_invalid | generation_invalid


def _job_tools(cell: Cell, names: Sequence[str], rng: random.Random, difficulty: str) -> list[str]:
    tool, category = cell
    others = [n for n in sorted(names) if n != tool]
    rng.shuffle(others)
    if category == "single_parallel":
        picked = others[:1] + others[1 : 1 + rng.randint(0, 1)]
    elif category == "multi_turn":
        need = {"easy": 0, "medium": 1, "hard": 2}[difficulty]
        picked = others[: need + rng.randint(0, 1)]
    else:
        picked = others[: rng.randint(0, 2)]
    return [tool] + picked


def synth_job(cell: Cell, k: int, round_no: int, cfg: PipelineConfig, backend: Backend,
              tools: Mapping[str, ToolSpec]) -> JobResult:
    tool, category = cell
    seed = _seed(cfg.seed, round_no, tool, category, k)
    rng = random.Random(seed)
    difficulty = rng.choice(list(cfg.synth.difficulties))
    names = _job_tools(cell, list(tools), rng, difficulty)
    ctx = SynthContext(
        backend,
        tools,
        server_mode=cfg.synth.server_mode,
        seed=seed,
        temperature=cfg.synth.temperature,
        max_reflection_attempts=cfg.qa.max_reflection_attempts,
        max_steps_per_round=cfg.synth.max_steps_per_round,
        max_generation_attempts=cfg.synth.max_generation_attempts,
    )
    tid = f"r{round_no}-{category}-{tool}-{k}"
    if category == "multi_turn":
        try:
            scenario = generate_task(
                [tools[n] for n in names], difficulty, backend, cfg.synth.max_generation_attempts, seed,
                cfg.synth.temperature,
            )
        except ScenarioInvalid as exc:
            logger.info("%s: %s", tid, exc)
            return JobResult(None, "scenario_invalid")
        rounds = rng.randint(cfg.synth.rounds_min, cfg.synth.rounds_max)
        traj = run_roleplay(scenario, names, rounds, ctx, tid)
        return JobResult(traj, traj.qa.status)
    kind = {"single_standard": "standard", "single_parallel": "parallel", "irrelevance": "irrelevance"}[category]
    try:
        return JobResult(synth_single_turn(kind, names, ctx, tid), "ok")
    except GenerationInvalid as exc:
        return JobResult(exc.trajectory, "generation_invalid")


def ledger_events(results: Iterable[JobResult]) -> list[dict[str, Any]]:
    """Hallucination events in job order (resolved ones first per trajectory)."""
    events = []
    for r in results:
        if r.trajectory is None:
            continue
        qa = r.trajectory.qa
        dtype = "multi_turn" if r.trajectory.category == "multi_turn" else "single_turn"
        events += [{"data_type": dtype, "resolved": True}] * qa.hallucinations_resolved
        events += [{"data_type": dtype, "resolved": False}] * (qa.hallucinations - qa.hallucinations_resolved)
    return events


def qa_one(traj: Trajectory, cfg: PipelineConfig, backend: Backend, tools: Mapping[str, ToolSpec]) -> tuple[Trajectory, str]:
    rounds = (cfg.synth.rounds_min, cfg.synth.rounds_max)
    problems = lint_trajectory(traj, tools, rounds) + provenance_violations(traj)
    if problems:
        traj.qa.status, traj.qa.failure = "rejected", "; ".join(problems)
        return traj, "lint_rejected"
    verdict = consensus_validate(traj, backend_validators(backend, cfg.qa.validators), cfg.qa.max_deliberation_rounds)
    traj = apply_verdict(traj, verdict)
    if traj.qa.status != "ok":
        traj.qa.failure = verdict.note or "consensus rejected"
        return traj, "consensus_rejected"
    try:
        traj = prune_rejections(traj)
    except PruneBreaksAlternation as exc:
        traj.qa.status, traj.qa.failure = "rejected", str(exc)
        return traj, "prune_rejected"
    problems = lint_trajectory(traj, tools, None)
    if problems:
        traj.qa.status, traj.qa.failure = "rejected", "; ".join(problems)
        return traj, "lint_rejected"
    return traj, "accepted"


def rollout_request(traj: Trajectory, specs: Sequence[ToolSpec], i: int, round_no: int, temperature: float) -> ChatRequest:
    system = AGENT_PROMPT + "\n\n" + render_toolset_prompt(specs)
    return ChatRequest(
        (Message("system", system), Message("user", traj.query)),
        tools=tuple(specs),
        temperature=temperature,
        logprobs_requested=True,
        agent="policy",
        metadata={
            "step": i,
            "fixture_key": traj.id,
            "rollout": i,
            "round": round_no,
            "gold": [c.to_json() for c in traj.gold],
            "cell": list(cell_of(traj)),
            "tools": [s.name for s in specs],
            "category": traj.category,
        },
    )


def backend_judge(backend: Backend, key: str) -> Any:
    def judge(reasoning: str) -> float:
        req = ChatRequest(
            (Message("system", "Rate the reasoning from 0 to 1. Reply {\"score\": x}."), Message("user", reasoning or "(none)")),
            temperature=0.0,
            agent="judge",
            metadata={"step": 0, "fixture_key": key, "reasoning": reasoning},
        )
        return parse_score(backend.chat(req).text)

    return judge


def evaluate_one(traj: Trajectory, cfg: PipelineConfig, backend: Backend, tools: Mapping[str, ToolSpec],
                 round_no: int) -> tuple[ConsistencyRecord, dict[str, Any]]:
    specs = [tools[n] for n in traj.qa.tools if n in tools]
    texts = [
        backend.chat(rollout_request(traj, specs, i, round_no, cfg.evolve.temperature)).text
        for i in range(cfg.evolve.group_size)
    ]
    record = consistency_score(traj.id, traj.gold, texts)
    tau = cfg.reward.schedule().at(round_no)
    judge = backend_judge(backend, traj.id)
    breakdowns = [
        score_text(t, traj.gold, tau, cfg.reward.alpha, judge, cfg.reward.require_think) for t in texts
    ]
    rewards = [b.total for b in breakdowns]
    group = {
        "id": traj.id,
        "c": record.c,
        "rewards": rewards,
        "advantages": group_advantages(rewards),
        "breakdowns": [b.to_json() for b in breakdowns],
    }
    return record, group


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

EXPORT_FILES = ("sft.jsonl", "grpo_prompts.jsonl", "rollouts.jsonl", "stratification.json")


def _jsonl(rows: Iterable[Mapping[str, Any]]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows)


def sft_row(traj: Trajectory, tools: Mapping[str, ToolSpec], config_hash: str) -> dict[str, Any]:
    row = traj.to_json()
    specs = [tools[n] for n in traj.qa.tools if n in tools]
    row["system"] = AGENT_PROMPT + "\n\n" + render_toolset_prompt(specs)
    row["config_hash"] = config_hash
    return row


def export_datasets(
    out_dir: str | Path,
    accepted: Sequence[Trajectory],
    tools: Mapping[str, ToolSpec],
    config_hash: str,
    records: Mapping[str, ConsistencyRecord] | None = None,
    gamma: float = 0.5,
    groups: Sequence[Mapping[str, Any]] = (),
    round_no: int = 0,
) -> dict[str, str]:
    """Write SFT, GRPO-prompt and rollout files plus the stratification
    manifest; returns ``{file name: sha256}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = records or {}
    sft = _jsonl(sft_row(t, tools, config_hash) for t in accepted)
    prompts = _jsonl(
        {
            "id": t.id,
            "category": t.category,
            "cell": list(cell_of(t)),
            "query": t.query,
            "tools": render_toolset_prompt([tools[n] for n in t.qa.tools if n in tools]),
            "gold": [c.to_json() for c in t.gold],
            "config_hash": config_hash,
        }
        for t in accepted
    )
    rollouts = _jsonl(dict(g, config_hash=config_hash) for g in groups)
    digests = {}
    for name, text in (("sft.jsonl", sft), ("grpo_prompts.jsonl", prompts), ("rollouts.jsonl", rollouts)):
        data = text.encode("utf-8")
        (out / name).write_bytes(data)
        digests[name] = sha256_bytes(data)
    scored = [t for t in accepted if t.id in records]
    easy, hard = stratify(scored, records, gamma) if scored else ([], [])
    manifest = {
        "config_hash": config_hash,
        "round": round_no,
        "gamma": gamma,
        "counts": {"accepted": len(accepted), "easy": len(easy), "hard": len(hard)},
        "easy": [t.id for t in easy],
        "hard": [t.id for t in hard],
        "records": {k: records[k].to_json() for k in sorted(records)},
        "files": dict(digests),
    }
    data = (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode("utf-8")
    (out / "stratification.json").write_bytes(data)
    digests["stratification.json"] = sha256_bytes(data)
    return digests


# ---------------------------------------------------------------------------
# Iteration state and the loop
# ---------------------------------------------------------------------------


@dataclass
class IterationState:
    round: int
    config_hash: str
    config: dict[str, Any]
    plan: InjectionPlan | None = None
    datasets: dict[str, list[str]] = field(default_factory=lambda: {"accepted": [], "easy": [], "hard": []})
    ledger: dict[str, Any] = field(default_factory=dict)
    reports: list[dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "config_hash": self.config_hash,
            "config": self.config,
            "plan": self.plan.to_json() if self.plan else None,
            "datasets": self.datasets,
            "ledger": self.ledger,
            "reports": self.reports,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> IterationState:
        plan = obj.get("plan")
        return cls(
            int(obj["round"]),
            str(obj["config_hash"]),
            dict(obj["config"]),
            InjectionPlan.from_json(plan) if plan else None,
            {k: list(v) for k, v in obj.get("datasets", {}).items()},
            dict(obj.get("ledger", {})),
            list(obj.get("reports", [])),
        )

    @classmethod
    def initial(cls, cfg: PipelineConfig) -> IterationState:
        return cls(0, cfg.digest(), cfg.snapshot())


class EventLog:
    """Append-only stage log; the single writer of a run directory."""

    def __init__(self, path: Path):
        self.path = path

    def append(self, event: Mapping[str, Any]) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def events(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line.strip()]

    def done(self, round_no: int, stage: str) -> bool:
        return any(e.get("round") == round_no and e.get("stage") == stage for e in self.events())


def load_state(out_dir: str | Path) -> IterationState | None:
    path = Path(out_dir) / "state.json"
    if not path.exists():
        return None
    return IterationState.from_json(json.loads(path.read_text(encoding="utf-8")))


def save_state(out_dir: str | Path, state: IterationState) -> None:
    path = Path(out_dir) / "state.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(state.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def replay_ledger(out_dir: str | Path, upto_round: int) -> HallucinationLedger:
    events: list[dict[str, Any]] = []
    for r in range(upto_round + 1):
        path = Path(out_dir) / f"round_{r:03d}" / "ledger_events.jsonl"
        if path.exists():
            events += [json.loads(x) for x in path.read_text(encoding="utf-8").splitlines() if x.strip()]
    return HallucinationLedger.replay(events)


def run_iteration(
    state: IterationState,
    cfg: PipelineConfig,
    backend: Backend,
    tools: Mapping[str, ToolSpec],
    out_dir: str | Path,
) -> IterationState:
    """One round: synth -> QA -> consistency -> stratify -> export -> plan.

    Stages checkpoint into ``out_dir/round_NNN`` and the event log, so a
    rerun after a crash resumes at the first unfinished stage.
    """
    if state.config_hash != cfg.digest():
        raise ValueError("config changed since this run started; start a new run directory")
    out = Path(out_dir)
    t = state.round
    rdir = out / f"round_{t:03d}"
    rdir.mkdir(parents=True, exist_ok=True)
    log = EventLog(out / "events.jsonl")
    universe = plan_universe(list(tools), cfg.synth.categories)
    plan = state.plan or plan_injection([], cfg.synth.batch_size, universe, seed=_seed(cfg.seed, t))
    workers = max(1, backend.parallelism)
    ledger_before = replay_ledger(out, t - 1).snapshot()

    # synth
    if log.done(t, "synth") and (rdir / "synth.jsonl").exists():
        stage = json.loads((rdir / "synth_counts.json").read_text(encoding="utf-8"))
        generated = read_jsonl((rdir / "synth.jsonl").read_text(encoding="utf-8"))
    else:
        jobs = plan.jobs()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: synth_job(j[0], j[1], t, cfg, backend, tools), jobs))
        stage = {"planned": len(jobs), "ok": 0, "failed": 0, "scenario_invalid": 0, "generation_invalid": 0}
        for r in results:
            stage[r.outcome] += 1
        generated = [r.trajectory for r in results if r.trajectory is not None and r.outcome == "ok"]
        (rdir / "ledger_events.jsonl").write_text(_jsonl(ledger_events(results)), encoding="utf-8")
        (rdir / "synth.jsonl").write_text(write_jsonl(generated), encoding="utf-8")
        (rdir / "synth_counts.json").write_text(json.dumps(stage, sort_keys=True) + "\n", encoding="utf-8")
        log.append({"round": t, "stage": "synth", "count": len(generated)})

    # QA
    if log.done(t, "qa") and (rdir / "accepted.jsonl").exists():
        accepted = read_jsonl((rdir / "accepted.jsonl").read_text(encoding="utf-8"))
        qa_counts = json.loads((rdir / "qa_counts.json").read_text(encoding="utf-8"))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            checked = list(pool.map(lambda tr: qa_one(tr, cfg, backend, tools), generated))
        qa_counts = {"accepted": 0, "lint_rejected": 0, "consensus_rejected": 0, "prune_rejected": 0}
        for _, outcome in checked:
            qa_counts[outcome] += 1
        qa_counts["pruned_tokens"] = sum(tr.qa.pruned_tokens for tr, _ in checked)
        accepted = [tr for tr, o in checked if o == "accepted"]
        rejected = [tr for tr, o in checked if o != "accepted"]
        (rdir / "accepted.jsonl").write_text(write_jsonl(accepted), encoding="utf-8")
        (rdir / "rejected.jsonl").write_text(write_jsonl(rejected), encoding="utf-8")
        (rdir / "qa_counts.json").write_text(json.dumps(qa_counts, sort_keys=True) + "\n", encoding="utf-8")
        log.append({"round": t, "stage": "qa", "accepted": len(accepted)})

    # consistency
    if log.done(t, "consistency") and (rdir / "consistency.json").exists():
        body = json.loads((rdir / "consistency.json").read_text(encoding="utf-8"))
        records = {k: ConsistencyRecord.from_json(v) for k, v in body["records"].items()}
        groups = body["groups"]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(lambda tr: evaluate_one(tr, cfg, backend, tools, t), accepted))
        records = {rec.query_id: rec for rec, _ in scored}
        groups = [g for _, g in scored]
        body = {"records": {k: records[k].to_json() for k in sorted(records)}, "groups": groups}
        (rdir / "consistency.json").write_text(json.dumps(body, sort_keys=True) + "\n", encoding="utf-8")
        log.append({"round": t, "stage": "consistency", "scored": len(records)})

    # stratify, export, plan
    easy, hard = stratify(accepted, records, cfg.evolve.gamma)
    digests = export_datasets(rdir, accepted, tools, state.config_hash, records, cfg.evolve.gamma, groups, t)
    next_plan = plan_injection(hard, cfg.synth.batch_size, universe, seed=_seed(cfg.seed, t + 1))
    ledger_after = replay_ledger(out, t).snapshot()
    report = {
        "round": t,
        "config_hash": state.config_hash,
        "plan": plan.to_json(),
        "synth": stage,
        "qa": qa_counts,
        "stratify": {"easy": len(easy), "hard": len(hard), "gamma": cfg.evolve.gamma},
        "ledger": ledger_after,
        "ledger_delta": {
            d: {k: ledger_after[d][k] - ledger_before[d][k] for k in ("total", "resolved", "failed")}
            for d in ledger_after
        },
        "exports": digests,
        "next_plan": next_plan.to_json(),
    }
    (rdir / "round_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    log.append({"round": t, "stage": "export", "files": digests})

    datasets = {k: list(v) for k, v in state.datasets.items()}
    datasets["accepted"].append(f"round_{t:03d}/sft.jsonl")
    datasets["easy"].append(f"round_{t:03d}/stratification.json#easy")
    datasets["hard"].append(f"round_{t:03d}/stratification.json#hard")
    new_state = replace(
        state,
        round=t + 1,
        plan=next_plan,
        datasets=datasets,
        ledger=ledger_after,
        reports=state.reports + [report],
    )
    save_state(out, new_state)
    return new_state


def run_loop(cfg: PipelineConfig, backend: Backend, tools: Mapping[str, ToolSpec], out_dir: str | Path,
             rounds: int, resume: bool = False) -> IterationState:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_state(out) if resume else None
    if state is None:
        if (out / "state.json").exists() or (out / "events.jsonl").exists():
            if not resume:
                raise FileExistsError(f"{out} already holds a run; pass resume or use a fresh directory")
        state = IterationState.initial(cfg)
        save_state(out, state)
    target = state.round + rounds if not resume else max(rounds, state.round)
    while state.round < target:
        state = run_iteration(state, cfg, backend, tools, out)
    return state


# ---------------------------------------------------------------------------
# Dataset statistics
# ---------------------------------------------------------------------------


def _quantiles(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=float)
    qs = np.percentile(arr, [5, 25, 50, 75, 95])
    return {k: float(v) for k, v in zip(("p5", "p25", "p50", "p75", "p95"), qs)}


def dataset_stats(trajs: Sequence[Trajectory], tools: Iterable[ToolSpec] | None = None) -> dict[str, Any]:
    """Turn-count distribution, per-category token spread, call-count mix."""
    if not trajs:
        raise ValueError("dataset is empty")
    turns = np.array([len(t.turns) for t in trajs])
    hist: dict[str, int] = {}
    for n in turns.tolist():
        hist[str(n)] = hist.get(str(n), 0) + 1
    tokens: dict[str, dict[str, float]] = {}
    for cat in CATEGORIES:
        vals = [t.token_count() for t in trajs if t.category == cat]
        if vals:
            tokens[cat] = _quantiles(vals)
    calls = [len(t.calls()) for t in trajs]
    n = len(trajs)
    mix = {
        "no_call": sum(1 for c in calls if c == 0) / n,
        "single_call": sum(1 for c in calls if c == 1) / n,
        "multi_call": sum(1 for c in calls if c > 1) / n,
    }
    out: dict[str, Any] = {
        "count": n,
        "turns": {
            "mean": float(turns.mean()),
            "median": float(np.median(turns)),
            "share_le_8": float((turns <= 8).mean()),
            "histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0]))),
        },
        "tokens_by_category": tokens,
        "tool_calls": mix,
        "categories": {c: sum(1 for t in trajs if t.category == c) for c in CATEGORIES},
    }
    if tools is not None:
        specs = list(tools)
        if specs:
            out["param_required_rate"] = sum(1 for s in specs if s.required) / len(specs)
    else:
        all_calls = [c for t in trajs for c in t.calls()]
        if all_calls:
            out["param_required_rate"] = sum(1 for c in all_calls if c.arguments) / len(all_calls)
    return out
