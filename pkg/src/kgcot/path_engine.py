"""Shortest reasoning paths between question and answer nodes, with LLM pruning."""

from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .graph_store import KnowledgeGraph, NodeLookupError
from .llm.gateway import ChatGateway, ChatRequest
from .llm.prompts import PromptSet, render_prompt

logger = logging.getLogger(__name__)

CONNECTED = "connected"
DISCONNECTED = "disconnected"
IDENTICAL = "identical-endpoints"

DEFAULT_K = 3
DEFAULT_CAP = 64
ARROW = "—{rel}→"


@dataclass(frozen=True)
class ReasoningPath:
    nodes: tuple[int, ...]
    relations: tuple[str, ...]

    def __post_init__(self):
        if len(self.relations) != len(self.nodes) - 1:
            raise ValueError("a path needs exactly one relation per hop")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.nodes[0], self.nodes[-1])

    @property
    def hops(self) -> int:
        return len(self.relations)

    def render(self, graph: KnowledgeGraph) -> str:
        parts = [graph.nodes[self.nodes[0]].name]
        for rel, nid in zip(self.relations, self.nodes[1:]):
            parts.append(ARROW.format(rel=rel))
            parts.append(graph.nodes[nid].name)
        return " ".join(parts)

    def to_dict(self, graph: KnowledgeGraph) -> dict:
        return {
            "nodes": list(self.nodes),
            "names": [graph.nodes[n].name for n in self.nodes],
            "relations": list(self.relations),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReasoningPath":
        return cls(tuple(data["nodes"]), tuple(data["relations"]))


@dataclass(frozen=True)
class PathSearch:
    paths: tuple[ReasoningPath, ...]
    status: str
    truncated: bool = False
    distance: int | None = None


def _bfs_layers(graph: KnowledgeGraph, src: int, dst: int) -> dict[int, int]:
    """BFS distances from ``src``, stopping once the layer holding ``dst`` is complete."""
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if dst in dist and dist[u] >= dist[dst]:
            break
        for v in graph.neighbor_ids(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def all_shortest_paths(graph: KnowledgeGraph, src: int, dst: int, cap: int = DEFAULT_CAP) -> PathSearch:
    """Every shortest path from ``src`` to ``dst``, in lexicographic node-id order.

    Parallel edges with different relations yield distinct paths. At most
    ``cap`` paths are returned; ``truncated`` tells whether more exist.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    for nid in (src, dst):
        if nid not in graph.nodes:
            raise NodeLookupError(f"unknown node id {nid}")
    if src == dst:
        return PathSearch((ReasoningPath((src,), ()),), IDENTICAL, distance=0)

    dist = _bfs_layers(graph, src, dst)
    if dst not in dist:
        return PathSearch((), DISCONNECTED)

    # walk back from dst over predecessor links to find the nodes of the shortest-path DAG
    on_dag = {dst}
    frontier = [dst]
    while frontier:
        nxt = []
        for v in frontier:
            for u in graph.neighbor_ids(v):
                if dist.get(u) == dist[v] - 1 and u not in on_dag:
                    on_dag.add(u)
                    nxt.append(u)
        frontier = nxt

    paths: list[ReasoningPath] = []
    truncated = False
    nodes = [src]
    rels: list[str] = []

    def extend(u: int) -> bool:
        nonlocal truncated
        if u == dst:
            if len(paths) >= cap:
                truncated = True
                return False
            paths.append(ReasoningPath(tuple(nodes), tuple(rels)))
            return True
        for v, edge in graph.neighbors(u):
            if v.id in on_dag and dist.get(v.id) == dist[u] + 1:
                nodes.append(v.id)
                rels.append(edge.display_relation)
                keep_going = extend(v.id)
                nodes.pop()
                rels.pop()
                if not keep_going:
                    return False
        return True

    extend(src)
    return PathSearch(tuple(paths), CONNECTED, truncated, dist[dst])


_INT = re.compile(r"\d+")


def parse_indices(reply: str, n: int, k: int) -> list[int]:
    """1-based path numbers in ``reply`` that fall in ``1..n``; first ``k`` distinct, as 0-based."""
    picked: list[int] = []
    for m in _INT.finditer(reply):
        i = int(m.group()) - 1
        if 0 <= i < n and i not in picked:
            picked.append(i)
            if len(picked) == k:
                break
    return picked


@dataclass(frozen=True)
class PruneResult:
    paths: tuple[ReasoningPath, ...]
    fallback: bool = False
    llm_calls: int = 0


def render_path_list(paths: Sequence[ReasoningPath], graph: KnowledgeGraph) -> str:
    return "\n".join(f"{i}. {p.render(graph)}" for i, p in enumerate(paths, start=1))


def prune_paths(paths: Sequence[ReasoningPath], question: str, llm: ChatGateway, graph: KnowledgeGraph,
                k: int = DEFAULT_K, prompts: PromptSet | None = None) -> PruneResult:
    """Keep at most ``k`` paths, chosen by the LLM, in their original order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    paths = tuple(paths)
    if len(paths) <= k:
        return PruneResult(paths)
    prompt = render_prompt("prune", {"paths": render_path_list(paths, graph), "question": question, "k": k},
                           prompts)
    calls = 0
    for attempt in range(2):
        text = prompt if attempt == 0 else (
            prompt + f"\nYour previous reply contained no valid path number. "
                     f"Use only numbers between 1 and {len(paths)}.\n")
        reply = llm.chat(ChatRequest("prune", text))
        calls += 1
        picked = parse_indices(reply, len(paths), k)
        if picked:
            return PruneResult(tuple(paths[i] for i in sorted(picked)), llm_calls=calls)
    logger.info("prune reply unusable twice; keeping the first %d of %d paths", k, len(paths))
    return PruneResult(paths[:k], fallback=True, llm_calls=calls)


@dataclass
class PairPaths:
    question: int
    answer: int
    status: str
    paths: tuple[ReasoningPath, ...] = ()
    raw_count: int = 0
    truncated: bool = False
    fallback: bool = False

    def to_dict(self, graph: KnowledgeGraph) -> dict:
        return {
            "question": self.question, "answer": self.answer, "status": self.status,
            "raw_count": self.raw_count, "truncated": self.truncated, "fallback": self.fallback,
            "paths": [p.to_dict(graph) for p in self.paths],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PairPaths":
        return cls(data["question"], data["answer"], data["status"],
                   tuple(ReasoningPath.from_dict(p) for p in data["paths"]),
                   data["raw_count"], data["truncated"], data["fallback"])


@dataclass
class PathBundle:
    pairs: list[PairPaths] = field(default_factory=list)

    @property
    def paths(self) -> list[ReasoningPath]:
        return [p for pair in self.pairs for p in pair.paths]

    @property
    def connected(self) -> int:
        return sum(1 for p in self.pairs if p.status == CONNECTED)

    @property
    def empty(self) -> bool:
        return not self.paths

    def to_dict(self, graph: KnowledgeGraph) -> dict:
        return {"pairs": [p.to_dict(graph) for p in self.pairs]}

    @classmethod
    def from_dict(cls, data: dict | None) -> "PathBundle":
        return cls([PairPaths.from_dict(p) for p in (data or {}).get("pairs", [])])


def collect_paths(question_nodes: Iterable[int], answer_nodes: Iterable[int], graph: KnowledgeGraph,
                  llm: ChatGateway, question: str, k: int = DEFAULT_K, cap: int = DEFAULT_CAP,
                  prompts: PromptSet | None = None) -> PathBundle:
    bundle = PathBundle()
    for q in sorted(set(question_nodes)):
        for a in sorted(set(answer_nodes)):
            found = all_shortest_paths(graph, q, a, cap)
            if found.status != CONNECTED:
                bundle.pairs.append(PairPaths(q, a, found.status))
                continue
            if found.truncated:
                logger.info("pair (%d, %d): more than %d shortest paths, truncated", q, a, cap)
            pruned = prune_paths(found.paths, question, llm, graph, k, prompts)
            bundle.pairs.append(PairPaths(q, a, CONNECTED, pruned.paths, len(found.paths),
                                          found.truncated, pruned.fallback))
    return bundle
