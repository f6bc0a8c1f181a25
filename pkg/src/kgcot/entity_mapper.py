"""Entity extraction and three-stage mapping of mentions onto graph nodes.

Stages, tried in order for each mention:

1. exact     folded name equality (whole-graph lookup, then the candidate set)
2. similarity  top candidate, if its cosine is strictly above ``tau``
3. llm_selected  the LLM picks one candidate by name, given the QA context
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .embed_index import CandidateSet, EmbeddingIndex
from .graph_store import KnowledgeGraph, fold_name
from .llm.gateway import ChatGateway, ChatRequest, EmbedGateway
from .llm.prompts import PromptSet, render_prompt

logger = logging.getLogger(__name__)

QUESTION = "question"
ANSWER = "answer"

EXACT = "exact"
SIMILARITY = "similarity"
LLM_SELECTED = "llm_selected"

DEFAULT_TAU = 0.85
DEFAULT_K_CANDIDATES = 10
DEFAULT_MAX_PER_ORIGIN = 16

_SEPARATOR = re.compile(r"∥|\|\|")
_NONE_WORDS = {"", "none", "n/a", "na", "-", "null", "no entities"}


class ExtractionError(ValueError):
    """The extraction reply could not be parsed, even after a re-prompt."""


@dataclass(frozen=True)
class MappingConfig:
    tau: float = DEFAULT_TAU
    k_candidates: int = DEFAULT_K_CANDIDATES
    max_per_origin: int = DEFAULT_MAX_PER_ORIGIN

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.k_candidates < 1:
            raise ValueError("k_candidates must be >= 1")
        if self.max_per_origin < 1:
            raise ValueError("max_per_origin must be >= 1")


@dataclass(frozen=True)
class EntityMention:
    surface: str
    origin: str
    ordinal: int

    def __post_init__(self):
        if not self.surface.strip():
            raise ValueError("mention surface is empty")
        if self.origin not in (QUESTION, ANSWER):
            raise ValueError(f"bad origin {self.origin!r}")

    def to_dict(self) -> dict:
        return {"surface": self.surface, "origin": self.origin, "ordinal": self.ordinal}


@dataclass(frozen=True)
class MappedEntity:
    mention: EntityMention
    node: int
    stage: str
    score: float | None = None

    def to_dict(self, graph: KnowledgeGraph | None = None) -> dict:
        d = {**self.mention.to_dict(), "node": self.node, "stage": self.stage, "score": self.score}
        if graph is not None:
            d["name"] = graph.nodes[self.node].name
        return d


@dataclass(frozen=True)
class Unmapped:
    mention: EntityMention
    reason: str

    def to_dict(self) -> dict:
        return {**self.mention.to_dict(), "node": None, "stage": None, "reason": self.reason}


def _split_entities(side: str) -> list[str]:
    out = []
    for part in re.split(r"[;\n]", side):
        part = part.strip().strip("\"'`*").strip()
        if fold_name(part) not in _NONE_WORDS:
            out.append(part)
    return out


def parse_extraction(reply: str) -> tuple[list[str], list[str]] | None:
    """Split ``"q1; q2 ∥ a1"`` into question and answer surfaces; None if malformed."""
    parts = _SEPARATOR.split(reply.strip())
    if len(parts) != 2:
        return None
    return _split_entities(parts[0]), _split_entities(parts[1])


def _dedup(surfaces: Iterable[str], limit: int) -> list[str]:
    seen: set[str] = set()
    kept = []
    for s in surfaces:
        key = fold_name(s)
        if key and key not in seen:
            seen.add(key)
            kept.append(s)
    return kept[:limit]


def extract_entities(question: str, answer: str, llm: ChatGateway, prompts: PromptSet | None = None,
                     max_per_origin: int = DEFAULT_MAX_PER_ORIGIN) -> list[EntityMention]:
    if not question.strip():
        raise ValueError("question is empty")
    prompt = render_prompt("extraction", {"question": question, "answer": answer}, prompts)
    parsed = None
    for attempt in range(2):
        text = prompt if attempt == 0 else (
            prompt + "\nYour previous reply did not follow the format. Reply with exactly one line "
                     "containing the ∥ separator.\n")
        parsed = parse_extraction(llm.chat(ChatRequest("extraction", text)))
        if parsed is not None:
            break
    if parsed is None:
        raise ExtractionError("extraction reply is not in the 'question ∥ answer' format")
    q_surfaces, a_surfaces = parsed
    if not answer.strip():
        a_surfaces = []
    mentions = [EntityMention(s, QUESTION, i) for i, s in enumerate(_dedup(q_surfaces, max_per_origin))]
    mentions += [EntityMention(s, ANSWER, i) for i, s in enumerate(_dedup(a_surfaces, max_per_origin))]
    return mentions


def _render_candidates(candidates: CandidateSet) -> str:
    return "\n".join(f"- {c.name}" for c in candidates)


def _match_candidate(reply: str, candidates: CandidateSet):
    text = reply.strip().splitlines()[0] if reply.strip() else ""
    text = re.sub(r"^(?:[-*•]\s*|\d+[.)]\s*)", "", text).strip().strip("\"'`.").strip()
    key = fold_name(text)
    for c in candidates:
        if fold_name(c.name) == key:
            return c
    return None


def map_entity(mention: EntityMention, graph: KnowledgeGraph, index: EmbeddingIndex, embedder: EmbedGateway,
               llm: ChatGateway, cfg: MappingConfig, question: str = "", answer: str = "",
               prompts: PromptSet | None = None) -> MappedEntity | Unmapped:
    hit = graph.node_by_name(mention.surface)
    if hit is not None:
        return MappedEntity(mention, hit.id, EXACT)

    candidates = index.top_k(mention.surface, cfg.k_candidates, embedder)
    key = fold_name(mention.surface)
    for c in candidates:
        if fold_name(c.name) == key:
            return MappedEntity(mention, c.node_id, EXACT)

    if candidates and candidates[0].score > cfg.tau:
        return MappedEntity(mention, candidates[0].node_id, SIMILARITY, candidates[0].score)

    prompt = render_prompt("select", {
        "entity": mention.surface, "candidates": _render_candidates(candidates),
        "question": question, "answer": answer,
    }, prompts)
    for attempt in range(2):
        text = prompt if attempt == 0 else (
            prompt + "\nYour previous reply did not name one of the listed candidates. "
                     "Copy one candidate name exactly, or reply NONE.\n")
        reply = llm.chat(ChatRequest("select", text))
        if fold_name(reply) in _NONE_WORDS:
            return Unmapped(mention, "no-suitable-candidate")
        chosen = _match_candidate(reply, candidates)
        if chosen is not None:
            return MappedEntity(mention, chosen.node_id, LLM_SELECTED)
    logger.info("selection for %r named no candidate twice", mention.surface)
    return Unmapped(mention, "selection-not-in-candidates")


@dataclass
class MappingResult:
    question_nodes: list[int]
    answer_nodes: list[int]
    mapped: list[MappedEntity]
    unmapped: list[Unmapped]

    @property
    def excluded(self) -> bool:
        return not self.question_nodes or not self.answer_nodes


def map_all(mentions: Sequence[EntityMention], graph: KnowledgeGraph, index: EmbeddingIndex,
            embedder: EmbedGateway, llm: ChatGateway, cfg: MappingConfig, question: str = "",
            answer: str = "", prompts: PromptSet | None = None) -> MappingResult:
    mapped: list[MappedEntity] = []
    unmapped: list[Unmapped] = []
    for m in mentions:
        r = map_entity(m, graph, index, embedder, llm, cfg, question, answer, prompts)
        (mapped if isinstance(r, MappedEntity) else unmapped).append(r)

    def nodes_for(origin: str) -> list[int]:
        return list(dict.fromkeys(r.node for r in mapped if r.mention.origin == origin))

    return MappingResult(nodes_for(QUESTION), nodes_for(ANSWER), mapped, unmapped)
