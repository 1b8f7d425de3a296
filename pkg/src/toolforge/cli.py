"""Command-line entry point: ``toolforge <command> [options]``.

Every command writes a run manifest (config hash, seed, input and output
digests). Failures print one JSON object to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from .backend import RemoteBackend, TokenBudget, load_fixtures
from .config import PipelineConfig, load_config
from .evolve import (
    ConsistencyRecord,
    dataset_stats,
    export_datasets,
    qa_one,
    run_loop,
    sha256_bytes,
    stratify,
)
from .reward import group_advantages, score_text
from .roleplay import GenerationInvalid, SynthContext, generate_task, run_roleplay, synth_single_turn
from .schema import SchemaError, ToolCall, dump_corpus, load_corpus, parse_corpus, parse_tool_spec
from .server import MCPServer, make_http_server, serve_stdio
from .simulated import simulated_backend
from .trajectory import ScenarioInvalid, Trajectory, read_jsonl, write_jsonl
from .tree import ToolCorpus, refine

logger = logging.getLogger("toolforge")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def make_backend(cfg: PipelineConfig, fixtures: str | None = None, embeddings: str | None = None):
    budget = TokenBudget(cfg.backend.token_budget or None)
    if cfg.backend.kind == "remote":
        return RemoteBackend(
            cfg.backend.base_url,
            cfg.backend.chat_model,
            cfg.backend.embed_model,
            api_key_env=cfg.backend.api_key_env,
            timeout=cfg.backend.timeout,
            max_retries=cfg.backend.max_retries,
            parallelism=cfg.backend.parallelism,
            budget=budget,
        )
    overrides = json.loads(Path(embeddings).read_text(encoding="utf-8")) if embeddings else None
    return simulated_backend(
        seed=cfg.seed,
        cfg=cfg.simulation,
        fixtures=load_fixtures(fixtures) if fixtures else None,
        embedding_overrides=overrides,
        embedding_dim=cfg.backend.embedding_dim,
        parallelism=cfg.backend.parallelism,
        budget=budget,
    )


def read_tools(path: str | Path) -> dict[str, Any]:
    specs = parse_corpus(Path(path).read_text(encoding="utf-8"))
    return {s.name: s for s in specs}


def digest_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_manifest(path: Path, command: str, argv: Sequence[str], cfg: PipelineConfig,
                   inputs: Sequence[str | Path], outputs: Sequence[str | Path], extra: dict | None = None) -> None:
    body = {
        "command": command,
        "argv": list(argv),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {str(p): digest_file(p) for p in inputs if p and Path(p).is_file()},
        "outputs": {str(p): digest_file(p) for p in outputs if Path(p).is_file()},
    }
    if extra:
        body.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _manifest_path(args: argparse.Namespace, out: Path) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _parse_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("..")
    try:
        a, b = int(lo), int(hi or lo)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected N..M, got {text!r}") from exc
    if a > b:
        raise argparse.ArgumentTypeError("empty range")
    return a, b


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    raw = load_corpus(Path(args.input).read_text(encoding="utf-8"))
    good, bad, seen = [], [], set()
    for i, item in enumerate(raw):
        try:
            spec = parse_tool_spec(item)
        except SchemaError as exc:
            bad.append({"index": i, "error": f"{type(exc).__name__}: {exc}"})
            continue
        if spec.name in seen:
            bad.append({"index": i, "error": f"duplicate tool name {spec.name!r}"})
            continue
        seen.add(spec.name)
        good.append(spec)
    out = Path(args.out)
    out.write_text(dump_corpus(good), encoding="utf-8")
    if args.strict and bad:
        raise CommandError(f"{len(bad)} malformed spec(s); first: {bad[0]['error']}")
    return {"inputs": [args.input], "outputs": [out], "summary": {"accepted": len(good), "rejected": bad}}


def cmd_dedup(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    specs = parse_corpus(Path(args.input).read_text(encoding="utf-8"))
    backend = make_backend(cfg, args.fixtures, args.embeddings)
    delta = args.delta if args.delta is not None else cfg.tree.delta
    rounds = args.max_rounds or cfg.tree.max_rounds
    corpus, reports = refine(ToolCorpus(tuple(specs)), delta, rounds, backend, cfg.tree.max_attempts)
    out = Path(args.out)
    out.write_text(dump_corpus(corpus.tools), encoding="utf-8")
    outputs: list[Path] = [out]
    summary = {"size_before": len(specs), "size_after": len(corpus), "rounds": [r.to_json() for r in reports]}
    if args.report:
        Path(args.report).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        outputs.append(Path(args.report))
    inputs = [args.input] + [p for p in (args.fixtures, args.embeddings) if p]
    return {"inputs": inputs, "outputs": outputs, "summary": {k: summary[k] for k in ("size_before", "size_after")}}


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    tools = read_tools(args.tools)
    backend = make_backend(cfg, args.fixtures)
    lo, hi = args.rounds
    names = sorted(tools)
    if not names:
        raise CommandError("the toolset is empty")

    def one(k: int) -> tuple[Trajectory | None, str]:
        rng = random.Random(f"{cfg.seed}:{args.kind}:{k}")
        first = names[k % len(names)]
        others = [n for n in names if n != first]
        rng.shuffle(others)
        ctx = SynthContext(
            backend, tools, cfg.synth.server_mode, seed=rng.randrange(2**32), temperature=cfg.synth.temperature,
            max_reflection_attempts=cfg.qa.max_reflection_attempts,
            max_steps_per_round=cfg.synth.max_steps_per_round,
            max_generation_attempts=cfg.synth.max_generation_attempts,
        )
        tid = f"{args.kind}-{k}"
        if args.kind == "multi_turn":
            difficulty = rng.choice(list(cfg.synth.difficulties))
            chosen = [first] + others[: {"easy": 0, "medium": 1, "hard": 2}[difficulty]]
            try:
                scenario = generate_task([tools[n] for n in chosen], difficulty, backend,
                                         cfg.synth.max_generation_attempts, ctx.seed, ctx.temperature)
            except ScenarioInvalid:
                return None, "scenario_invalid"
            traj = run_roleplay(scenario, chosen, rng.randint(lo, hi), ctx, tid)
            return traj, traj.qa.status
        chosen = [first] + others[: 1 if args.kind == "parallel" else rng.randint(0, 2)]
        try:
            return synth_single_turn(args.kind, chosen, ctx, tid), "ok"
        except GenerationInvalid:
            return None, "generation_invalid"

    with ThreadPoolExecutor(max_workers=backend.parallelism) as pool:
        results = list(pool.map(one, range(args.count)))
    kept = [t for t, status in results if t is not None and status == "ok"]
    counts: dict[str, int] = {}
    for _, status in results:
        counts[status] = counts.get(status, 0) + 1
    out = Path(args.out)
    out.write_text(write_jsonl(kept), encoding="utf-8")
    return {"inputs": [args.tools], "outputs": [out], "summary": counts}


def cmd_qa(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    tools = read_tools(args.tools)
    backend = make_backend(cfg, args.fixtures)
    trajs = read_jsonl(Path(args.input).read_text(encoding="utf-8"))
    with ThreadPoolExecutor(max_workers=backend.parallelism) as pool:
        checked = list(pool.map(lambda t: qa_one(t, cfg, backend, tools), trajs))
    accepted = [t for t, o in checked if o == "accepted"]
    out = Path(args.out)
    out.write_text(write_jsonl(accepted), encoding="utf-8")
    counts: dict[str, int] = {}
    for _, o in checked:
        counts[o] = counts.get(o, 0) + 1
    return {"inputs": [args.input, args.tools], "outputs": [out], "summary": counts}


def cmd_reward(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    """Score ``{"id", "text", "gold", "teacher"[, "group"]}`` lines."""
    tau = args.tau if args.tau is not None else cfg.reward.schedule().at(args.round)
    alpha = args.alpha if args.alpha is not None else cfg.reward.alpha
    rows = [json.loads(x) for x in Path(args.input).read_text(encoding="utf-8").splitlines() if x.strip()]
    scored = []
    for row in rows:
        gold = [ToolCall.from_json(c) for c in row.get("gold", [])]
        b = score_text(row["text"], gold, tau, alpha, float(row.get("teacher", 0.0)), cfg.reward.require_think)
        scored.append({"id": row.get("id"), "group": row.get("group"), **b.to_json()})
    groups: dict[Any, list[int]] = {}
    for i, s in enumerate(scored):
        if s["group"] is not None:
            groups.setdefault(s["group"], []).append(i)
    for idx in groups.values():
        if len(idx) >= 2:
            for i, a in zip(idx, group_advantages([scored[i]["total"] for i in idx])):
                scored[i]["advantage"] = a
    out = Path(args.out)
    out.write_text("".join(json.dumps(s, sort_keys=True) + "\n" for s in scored), encoding="utf-8")
    return {"inputs": [args.input], "outputs": [out], "summary": {"scored": len(scored), "tau": tau}}


def _read_records(path: str) -> dict[str, ConsistencyRecord]:
    text = Path(path).read_text(encoding="utf-8").strip()
    try:
        body = json.loads(text)
    except json.JSONDecodeError:
        items = [json.loads(x) for x in text.splitlines() if x.strip()]
    else:
        if isinstance(body, dict) and "query_id" in body:
            items = [body]
        else:
            raw = body.get("records", body) if isinstance(body, dict) else body
            items = raw.values() if isinstance(raw, dict) else raw
    recs = [ConsistencyRecord.from_json(r) for r in items]
    return {r.query_id: r for r in recs}


def cmd_stratify(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    gamma = args.gamma if args.gamma is not None else cfg.evolve.gamma
    records = _read_records(args.records)
    if args.input:
        samples = read_jsonl(Path(args.input).read_text(encoding="utf-8"))
    else:
        samples = [Trajectory(q, "single_standard", []) for q in sorted(records)]
    easy, hard = stratify(samples, records, gamma)
    body = {"gamma": gamma, "easy": [t.id for t in easy], "hard": [t.id for t in hard]}
    out = Path(args.out)
    out.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    inputs = [args.records] + ([args.input] if args.input else [])
    return {"inputs": inputs, "outputs": [out], "summary": {"easy": len(easy), "hard": len(hard)}}


def cmd_export(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    tools = read_tools(args.tools)
    accepted = read_jsonl(Path(args.input).read_text(encoding="utf-8"))
    records = _read_records(args.records) if args.records else {}
    out = Path(args.out)
    digests = export_datasets(out, accepted, tools, cfg.digest(), records, cfg.evolve.gamma)
    inputs = [args.input, args.tools] + ([args.records] if args.records else [])
    return {"inputs": inputs, "outputs": [out / n for n in digests], "summary": {"accepted": len(accepted)}}


def cmd_loop(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    tools_path = args.tools or cfg.paths.tools
    if not tools_path:
        raise CommandError("no toolset: pass --tools or set paths.tools in the config")
    tools = read_tools(tools_path)
    out = Path(args.out or cfg.paths.out_dir)
    backend = make_backend(cfg, args.fixtures)
    before = set()
    if out.exists():
        before = {p for p in out.rglob("round_*/*") if p.is_file()}
    state = run_loop(cfg, backend, tools, out, args.rounds, resume=args.resume)
    produced = sorted(p for p in out.rglob("round_*/*") if p.is_file() and p not in before)
    start = state.round - len({p.parent for p in produced})
    manifest = out / f"manifest_{max(start, 0):03d}-{state.round:03d}.json"
    args.manifest = args.manifest or str(manifest)
    last = state.reports[-1] if state.reports else {}
    summary = {"round": state.round, "accepted": last.get("qa", {}).get("accepted"), "ledger": state.ledger}
    return {"inputs": [tools_path] + ([args.config] if args.config else []), "outputs": produced, "summary": summary}


def cmd_serve(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any] | None:
    tools = read_tools(args.tools)
    backend = make_backend(cfg, args.fixtures) if args.mode == "generative" else None
    server = MCPServer(tools.values(), args.mode, cfg.seed, backend)
    if args.http is not None:
        httpd = make_http_server(server, args.host, args.http)
        host, port = httpd.server_address[:2]
        print(json.dumps({"listening": f"http://{host}:{port}"}), file=sys.stderr, flush=True)
        try:
            httpd.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            httpd.server_close()
    else:
        serve_stdio(server, sys.stdin, sys.stdout, workers=cfg.backend.parallelism)
    return None


def cmd_stats(args: argparse.Namespace, cfg: PipelineConfig) -> dict[str, Any]:
    trajs = read_jsonl(Path(args.input).read_text(encoding="utf-8"))
    tools = list(read_tools(args.tools).values()) if args.tools else None
    stats = dataset_stats(trajs, tools)
    out = Path(args.out)
    outputs = [out]
    out.write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "value"])
        for key, value in _flatten(stats):
            w.writerow([key, value])
        Path(args.csv).write_text(buf.getvalue(), encoding="utf-8")
        outputs.append(Path(args.csv))
    return {"inputs": [args.input], "outputs": outputs, "summary": {"count": stats["count"]}}


def _flatten(obj: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(obj, dict):
        out = []
        for k in sorted(obj):
            out += _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
        return out
    return [(prefix, obj)]


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toolforge", description="Tool-use trajectory synthesis pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, fixtures: bool = True) -> None:
        sp.add_argument("--config", help="pipeline TOML config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--manifest", help="where to write the run manifest")
        if fixtures:
            sp.add_argument("--fixtures", help="scripted-backend transcript (JSONL)")

    sp = sub.add_parser("ingest", help="parse and normalise a raw tool corpus")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--strict", action="store_true", help="fail on any malformed spec")
    common(sp, fixtures=False)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("dedup", help="cluster and merge redundant tools until fixpoint")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--max-rounds", type=int)
    sp.add_argument("--embeddings", help="JSON map of embedding text -> vector (scripted backend)")
    sp.add_argument("--report", help="write per-round refinement reports here")
    common(sp)
    sp.set_defaults(func=cmd_dedup)

    sp = sub.add_parser("synth", help="generate trajectories")
    sp.add_argument("--kind", required=True, choices=["standard", "parallel", "irrelevance", "multi_turn"])
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--tools", required=True)
    sp.add_argument("--rounds", type=_parse_range, default=(3, 5), help="user rounds, e.g. 3..5")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("qa", help="lint and consensus-validate trajectories")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--tools", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_qa)

    sp = sub.add_parser("reward", help="score responses with the gated composite reward")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--round", type=int, default=0, help="round for the tau schedule")
    common(sp, fixtures=False)
    sp.set_defaults(func=cmd_reward)

    sp = sub.add_parser("stratify", help="split samples into easy and hard")
    sp.add_argument("--records", required=True, help="consistency records (JSONL or JSON)")
    sp.add_argument("--in", dest="input", help="trajectories to split (defaults to the record ids)")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--out", required=True)
    common(sp, fixtures=False)
    sp.set_defaults(func=cmd_stratify)

    sp = sub.add_parser("export", help="write SFT / GRPO files and the manifest")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--tools", required=True)
    sp.add_argument("--records")
    sp.add_argument("--out", required=True)
    common(sp, fixtures=False)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("loop", help="run self-evolution rounds")
    sp.add_argument("--rounds", type=int, required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--tools")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_loop)

    sp = sub.add_parser("serve", help="JSON-RPC tool-server simulator")
    sp.add_argument("--tools", required=True)
    sp.add_argument("--mode", choices=["template", "generative"], default="template")
    sp.add_argument("--http", type=int, metavar="PORT", help="serve HTTP on PORT (0 picks one); default stdio")
    sp.add_argument("--host", default="127.0.0.1")
    common(sp)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("stats", help="dataset statistics")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")
    sp.add_argument("--tools")
    common(sp, fixtures=False)
    sp.set_defaults(func=cmd_stats)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        result = args.func(args, cfg)
        if result is None:
            return 0
        outputs = [Path(o) for o in result["outputs"]]
        primary = Path(args.out) if getattr(args, "out", None) else outputs[0]
        write_manifest(
            _manifest_path(args, primary),
            args.command,
            argv,
            cfg,
            result["inputs"],
            outputs,
            {"summary": result.get("summary")},
        )
        print(json.dumps({"command": args.command, "summary": result.get("summary")}, sort_keys=True, default=str))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        logger.debug("command failed", exc_info=True)
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
