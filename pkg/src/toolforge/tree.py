"""Iterative tool-corpus refinement: cluster, discriminate, merge.

Each round embeds every tool (name and description), links tools whose
cosine similarity exceeds ``delta``, and takes connected components as
candidate clusters. A discriminator agent splits each multi-member cluster
into a redundant subset and a unique subset; a generator agent folds the
redundant subset into one consolidated spec. Rounds repeat until nothing
merges.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .backend import Backend, ChatRequest, Message, embed_texts
from .schema import Origin, SchemaError, ToolSpec, parse_tool_spec

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 0.85


class DiscriminatorUnparseable(ValueError):
    pass


class MergeInvalid(ValueError):
    pass


@dataclass(frozen=True)
class ToolCorpus:
    tools: tuple[ToolSpec, ...]
    round: int = 0
    # merged name -> names it absorbed, accumulated over rounds
    lineage: dict[str, tuple[str, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        names = [t.name for t in self.tools]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate tool names: {dupes}")

    def __len__(self) -> int:
        return len(self.tools)

    def by_name(self) -> dict[str, ToolSpec]:
        return {t.name: t for t in self.tools}


@dataclass(frozen=True)
class Cluster:
    members: tuple[str, ...]
    edges: tuple[tuple[str, str, float], ...] = ()

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class PartitionDecision:
    redundant: frozenset[str]
    unique: frozenset[str]
    rationale: str = ""
    fallback: bool = False


@dataclass
class RefinementIterationReport:
    round: int
    clusters: int = 0
    singletons: int = 0
    merges: int = 0
    fallbacks: int = 0
    merge_rejections: int = 0
    size_before: int = 0
    size_after: int = 0
    lineage: dict[str, list[str]] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "clusters": self.clusters,
            "singletons": self.singletons,
            "merges": self.merges,
            "fallbacks": self.fallbacks,
            "merge_rejections": self.merge_rejections,
            "size_before": self.size_before,
            "size_after": self.size_after,
            "lineage": self.lineage,
            "errors": self.errors,
        }


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


def connected_components(vectors: np.ndarray, delta: float) -> list[list[int]]:
    """Single-linkage components of the graph with an edge where cos > delta.

    ``vectors`` must be unit-normalised rows. Components come back ordered
    by their smallest index, members ascending.
    """
    n = len(vectors)
    if n == 0:
        return []
    sims = vectors @ vectors.T
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    rows, cols = np.nonzero(np.triu(sims > delta, k=1))
    for i, j in zip(rows.tolist(), cols.tolist()):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def cluster_tools(corpus: ToolCorpus, delta: float, backend: Backend) -> list[Cluster]:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    tools = corpus.tools
    if not tools:
        return []
    vecs = np.array([v.values for v in embed_texts(backend, [t.embedding_text for t in tools])])
    sims = vecs @ vecs.T
    clusters = []
    for comp in connected_components(vecs, delta):
        edges = tuple(
            (tools[i].name, tools[j].name, float(sims[i, j]))
            for a, i in enumerate(comp)
            for j in comp[a + 1 :]
            if sims[i, j] > delta
        )
        clusters.append(Cluster(tuple(tools[i].name for i in comp), edges))
    return clusters


# ---------------------------------------------------------------------------
# Discrimination
# ---------------------------------------------------------------------------

DISCRIMINATOR_PROMPT = """You audit a catalogue of API tools for duplicates.
The tools below were grouped because their descriptions are similar.
Decide which of them are functionally redundant (they do the same job and
could be replaced by one consolidated tool) and which are genuinely unique.

Answer with strict JSON and nothing else:
{"redundant": [<tool names>], "unique": [<tool names>], "rationale": "<one sentence>"}

Every tool name must appear in exactly one list. A single tool cannot be
redundant on its own."""


def extract_json(text: str) -> Any:
    """Decode the first JSON object or array in ``text`` (fences tolerated)."""
    text = text.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if fence:
        text = fence.group(1).strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    for opener in ("{", "["):
        start = text.find(opener)
        if start < 0:
            continue
        try:
            obj, _ = json.JSONDecoder().raw_decode(text[start:])
            return obj
        except json.JSONDecodeError:
            continue
    raise ValueError("no JSON value found")


def parse_verdict(text: str, members: Sequence[str]) -> PartitionDecision:
    try:
        obj = extract_json(text)
    except ValueError as exc:
        raise DiscriminatorUnparseable(str(exc)) from exc
    if not isinstance(obj, dict):
        raise DiscriminatorUnparseable("verdict is not an object")
    red, uni = obj.get("redundant", []), obj.get("unique", [])
    if not isinstance(red, list) or not isinstance(uni, list):
        raise DiscriminatorUnparseable("redundant/unique must be lists")
    member_set = set(members)
    red_set, uni_set = set(map(str, red)), set(map(str, uni))
    stray = (red_set | uni_set) - member_set
    if stray:
        raise DiscriminatorUnparseable(f"names outside the cluster: {sorted(stray)}")
    if red_set & uni_set:
        raise DiscriminatorUnparseable(f"names in both lists: {sorted(red_set & uni_set)}")
    # unmentioned members stay unique; a lone "redundant" tool is unique too
    uni_set |= member_set - red_set - uni_set
    if len(red_set) == 1:
        uni_set |= red_set
        red_set = set()
    return PartitionDecision(frozenset(red_set), frozenset(uni_set), str(obj.get("rationale", "")))


def discriminate(
    cluster: Cluster,
    specs: dict[str, ToolSpec],
    backend: Backend,
    max_attempts: int = 3,
) -> PartitionDecision:
    members = list(cluster.members)
    if len(members) < 2:
        return PartitionDecision(frozenset(), frozenset(members), "singleton")
    listing = "\n".join(json.dumps(specs[m].to_json(), sort_keys=True) for m in members)
    messages = (Message("system", DISCRIMINATOR_PROMPT), Message("user", listing))
    key = "|".join(sorted(members))
    for attempt in range(max_attempts):
        request = ChatRequest(
            messages,
            temperature=0.0,
            agent="discriminator",
            metadata={"step": attempt, "fixture_key": key, "specs": [specs[m].to_json() for m in members]},
        )
        text = backend.chat(request).text
        try:
            return parse_verdict(text, members)
        except DiscriminatorUnparseable as exc:
            logger.info("discriminator verdict for %s unparseable (attempt %d): %s", key, attempt + 1, exc)
    logger.warning("discriminator gave up on cluster %s; keeping all members", key)
    return PartitionDecision(frozenset(), frozenset(members), "unparseable verdict", fallback=True)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------

MERGE_PROMPT = """The tools below are functionally redundant. Write ONE consolidated
tool definition that covers all of them: a clear name, a precise description
and a parameter schema that is the union of their parameters (resolve
conflicting types sensibly).

Answer with strict JSON only:
{"name": "...", "description": "...", "parameters": {"<param>": {"type": "...", "description": "..."}}, "required": [...]}"""


def abstract_merge(redundant: Sequence[ToolSpec], backend: Backend) -> ToolSpec:
    if len(redundant) < 2:
        raise ValueError("merging needs at least two tools")
    ordered = sorted(redundant, key=lambda s: s.name)
    listing = "\n".join(json.dumps(s.to_json(), sort_keys=True) for s in ordered)
    request = ChatRequest(
        (Message("system", MERGE_PROMPT), Message("user", listing)),
        temperature=0.0,
        agent="merger",
        metadata={"step": 0, "fixture_key": "|".join(s.name for s in ordered), "specs": [s.to_json() for s in ordered]},
    )
    text = backend.chat(request).text
    try:
        raw = extract_json(text)
        if isinstance(raw, dict):
            raw = {k: v for k, v in raw.items() if k != "origin"}
        merged = parse_tool_spec(raw)
    except (ValueError, SchemaError) as exc:
        raise MergeInvalid(f"generated spec rejected: {exc}") from exc
    sources: list[str] = []
    for s in ordered:
        sources.extend(s.origin.sources if s.origin.kind == "merged" else (s.name,))
    return ToolSpec(
        name=merged.name,
        description=merged.description,
        parameters=merged.parameters,
        required=merged.required,
        origin=Origin("merged", tuple(sorted(set(sources)))),
        extra=merged.extra,
    )


# ---------------------------------------------------------------------------
# Refinement loop
# ---------------------------------------------------------------------------


def refine_round(
    corpus: ToolCorpus, delta: float, backend: Backend, max_attempts: int = 3
) -> tuple[ToolCorpus, RefinementIterationReport]:
    report = RefinementIterationReport(round=corpus.round + 1, size_before=len(corpus))
    specs = corpus.by_name()
    clusters = cluster_tools(corpus, delta, backend)
    multi = [c for c in clusters if len(c) >= 2]
    report.clusters = len(multi)
    report.singletons = len(clusters) - len(multi)

    def work(cluster: Cluster) -> tuple[PartitionDecision, ToolSpec | None, str | None]:
        decision = discriminate(cluster, specs, backend, max_attempts)
        if len(decision.redundant) < 2:
            return decision, None, None
        try:
            merged = abstract_merge([specs[n] for n in decision.redundant], backend)
        except MergeInvalid as exc:
            return decision, None, str(exc)
        return decision, merged, None

    workers = max(1, min(backend.parallelism, len(multi) or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(work, multi))

    # single-threaded reduction, in cluster order
    absorbed: dict[str, ToolSpec] = {}
    first_of: dict[str, ToolSpec] = {}
    taken = {n for n in specs}
    for cluster, (decision, merged, err) in zip(multi, results):
        if decision.fallback:
            report.fallbacks += 1
        if err is not None:
            report.merge_rejections += 1
            report.errors.append(f"{'|'.join(sorted(decision.redundant))}: {err}")
            continue
        if merged is None:
            continue
        clash = merged.name in taken and merged.name not in decision.redundant
        if clash:
            report.merge_rejections += 1
            report.errors.append(f"merged name {merged.name!r} collides with an existing tool")
            continue
        taken.add(merged.name)
        ordered = [m for m in cluster.members if m in decision.redundant]
        first_of[ordered[0]] = merged
        for name in ordered:
            absorbed[name] = merged
        report.merges += 1
        report.lineage[merged.name] = list(merged.origin.sources)

    out: list[ToolSpec] = []
    for tool in corpus.tools:
        if tool.name in first_of:
            out.append(first_of[tool.name])
        elif tool.name not in absorbed:
            out.append(tool)
    lineage = dict(corpus.lineage)
    lineage.update({k: tuple(v) for k, v in report.lineage.items()})
    new = ToolCorpus(tuple(out), corpus.round + 1, lineage)
    report.size_after = len(new)
    return new, report


def refine(
    corpus: ToolCorpus,
    delta: float = DEFAULT_DELTA,
    max_rounds: int = 4,
    backend: Backend | None = None,
    max_attempts: int = 3,
) -> tuple[ToolCorpus, list[RefinementIterationReport]]:
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    if backend is None:
        raise ValueError("a backend is required for embeddings and agents")
    reports = []
    for _ in range(max_rounds):
        corpus, report = refine_round(corpus, delta, backend, max_attempts)
        reports.append(report)
        logger.info(
            "round %d: %d clusters, %d merges, size %d -> %d",
            report.round, report.clusters, report.merges, report.size_before, report.size_after,
        )
        if report.merges == 0:
            break
    return corpus, reports
