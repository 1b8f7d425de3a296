"""Shared builders for test corpora and trajectories."""

import numpy as np

from toolforge.trajectory import TaskScenario, ToolNeed

from toolforge.schema import ParamSchema, ToolSpec
from toolforge.tree import ToolCorpus


def spec(name, params=("q",), description=None, required=()):
    return ToolSpec(
        name=name,
        description=description or f"Tool {name}.",
        parameters={p: ParamSchema("string") for p in params},
        required=frozenset(required),
    )


def planted_corpus(k, singles=10, dim=64, seed=0, noise=0.05):
    """``k`` near-duplicate pairs plus ``singles`` unrelated tools.

    Pair members share parameter names (so the offline discriminator calls
    them redundant) and get pinned embeddings with cosine close to 1.
    Returns the corpus and the embedding override table.
    """
    rng = np.random.default_rng(seed)
    tools, overrides = [], {}
    for i in range(k):
        base = rng.standard_normal(dim)
        base /= np.linalg.norm(base)
        twin = base + noise * rng.standard_normal(dim) / np.sqrt(dim)
        params = (f"p{i}_id", f"p{i}_mode")
        a = spec(f"svc{i:02d}_a", params, f"Look up record {i} by identifier, with full detail.")
        b = spec(f"svc{i:02d}_b", params, f"Look up record {i} by identifier.")
        tools += [a, b]
        overrides[a.embedding_text] = base
        overrides[b.embedding_text] = twin
    for j in range(singles):
        tools.append(spec(f"solo{j:02d}", (f"s{j}",), f"Unrelated utility number {j}."))
    return ToolCorpus(tuple(tools)), overrides


def brute_components(vectors, delta):
    """Reference clustering: pairwise cosine, then depth-first search."""
    n = len(vectors)
    adj = [[j for j in range(n) if j != i and float(np.dot(vectors[i], vectors[j])) > delta] for i in range(n)]
    seen, comps = set(), []
    for start in range(n):
        if start in seen:
            continue
        stack, comp = [start], []
        seen.add(start)
        while stack:
            node = stack.pop()
            comp.append(node)
            for nb in adj[node]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        comps.append(sorted(comp))
    return sorted(comps)


def freight_turns():
    """The worked freight-quote conversation: quote, then booking by quote id."""
    from toolforge.schema import ToolCall
    from toolforge.trajectory import ToolResult, Turn

    quote = ToolCall("get_freight_quote", {"shipment_weight": 500, "source": "Shanghai", "destination": "Rotterdam", "cargo_type": "frozen"}, id="c0")
    return [
        Turn("user", "I need to ship 500 kg of frozen goods from Shanghai to Rotterdam."),
        Turn("assistant", "", (quote,), think="Get a quote first."),
        Turn("tool", "", (), (ToolResult("c0", "ok", {"quote_id": "Q-77812", "freight_cost_estimate": 1830.5}),)),
        Turn("assistant", "The estimate is 1830.5 USD under quote Q-77812."),
    ]


def make_trajectory(turns=None, category="multi_turn", gold=None, scenario=None, tid="t0"):
    from toolforge.trajectory import Trajectory

    turns = freight_turns() if turns is None else turns
    if gold is None:
        gold = [c for t in turns if t.role == "assistant" for c in t.tool_calls]
    return Trajectory(tid, category, list(turns), list(gold), scenario)


FREIGHT_SCENARIO = TaskScenario(
    title="Frozen Goods Shipment Planning",
    user_profile="Logistics coordinator at a seafood exporter; brief and practical.",
    known_info={"shipment_weight": 500, "source": "Shanghai", "destination": "Rotterdam", "cargo_type": "frozen"},
    unknown_info=("freight_cost_estimate",),
    user_need="Find out what shipping the frozen cargo will cost.",
    difficulty="easy",
    tools_needed=(
        ToolNeed(
            "get_freight_quote",
            {k: {"$known": k} for k in ("shipment_weight", "source", "destination", "cargo_type")},
            ("freight_cost_estimate",),
        ),
    ),
    success_criteria=("the final answer cites the quoted cost",),
)
