"""Per-QA-pair CoT synthesis: extract → map → paths → generate → verify.

Input JSONL, one object per line::

    {"id": "...", "source": "medqa", "question": "...",
     "options": [{"label": "A", "text": "..."}],     # optional
     "answer": {"label": "B", "text": "..."},        # label and/or text
     "split": "train"}                               # optional, must be "train"

Outputs (in ``output_dir``): ``filtered.jsonl`` (retained records only),
``audit.jsonl`` (every record with mentions, mappings, bundle, verdict and
status), ``stats.json`` and ``stats.txt``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

from .embed_index import EmbeddingIndex, IndexQueryError
from .entity_mapper import ANSWER, QUESTION, ExtractionError, MappingConfig, extract_entities, map_all
from .graph_store import KnowledgeGraph
from .llm.gateway import ChatGateway, ChatRequest, CredentialError, EmbedGateway, ProviderError
from .llm.prompts import PromptSet, render_prompt
from .matching import (
    MATCH_RULES_VERSION,
    effective_options,
    extract_choice,
    match_answer,
    strip_answer_prefix,
)
from .path_engine import DEFAULT_CAP, DEFAULT_K, PathBundle, collect_paths, render_path_list
from .stats import PipelineStats, compute_stats

logger = logging.getLogger(__name__)

GENERATED = "generated"
RETAINED = "retained"
REJECTED = "rejected"
EXCLUDED = "excluded"
EXCLUSION_REASONS = ("no-entities", "no-mapping", "no-paths", "llm-failure")


class InputError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class GenerationError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class QaPair:
    id: str
    source: str
    question: str
    answer_label: str | None = None
    answer_text: str | None = None
    options: tuple[tuple[str, str], ...] | None = None
    split: str = "train"

    def __post_init__(self):
        if not self.id:
            raise ValueError("QA pair id is empty")
        if not self.question.strip():
            raise ValueError("question is empty")
        if self.answer_label is None and self.answer_text is None:
            raise ValueError("answer needs a label or a text")
        if self.options is not None:
            labels = [l for l, _ in self.options]
            if len(set(labels)) != len(labels):
                raise ValueError("duplicate option labels")
            if self.answer_label is not None and self.answer_label not in labels:
                raise ValueError(f"answer label {self.answer_label!r} is not an option label")

    @classmethod
    def from_dict(cls, d: dict) -> "QaPair":
        answer = d.get("answer")
        if isinstance(answer, str):
            answer = {"text": answer}
        if not isinstance(answer, dict):
            raise ValueError("answer must be an object with label and/or text")
        options = d.get("options")
        if options is not None:
            options = tuple((str(o["label"]), str(o["text"])) for o in options)
        return cls(str(d.get("id", "")), str(d.get("source", "")), str(d.get("question", "")),
                   answer.get("label"), answer.get("text"), options, str(d.get("split", "train")))

    def answer_dict(self) -> dict:
        out = {}
        if self.answer_label is not None:
            out["label"] = self.answer_label
        if self.answer_text is not None:
            out["text"] = self.answer_text
        return out

    @property
    def gold_text(self) -> str:
        """Answer text used for extraction and generation."""
        if self.answer_text is not None:
            return self.answer_text
        return dict(self.options or ()).get(self.answer_label, "")

    def question_block(self) -> str:
        opts = effective_options(self.options, self.answer_text)
        if not opts:
            return self.question
        if self.options:
            lines = [f"{l}. {t}" for l, t in opts]
        else:
            lines = [f"- {t}" for _, t in opts]
        return self.question + "\n\nOptions:\n" + "\n".join(lines)

    def answer_block(self) -> str:
        if self.answer_label is not None and self.options:
            return f"{self.answer_label}. {self.gold_text}"
        return self.gold_text


def read_qa_jsonl(fh: IO[str]) -> list[QaPair]:
    pairs: list[QaPair] = []
    seen: set[str] = set()
    for line_no, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            if not isinstance(data, dict):
                raise ValueError("expected a JSON object")
            qa = QaPair.from_dict(data)
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(str(exc), line_no) from None
        if qa.split != "train":
            raise InputError(f"pair {qa.id!r} is from split {qa.split!r}; only training data is allowed",
                             line_no)
        if qa.id in seen:
            raise InputError(f"duplicate id {qa.id!r}", line_no)
        seen.add(qa.id)
        pairs.append(qa)
    return pairs


def load_qa(path: str | Path) -> list[QaPair]:
    with open(path, encoding="utf-8") as fh:
        return read_qa_jsonl(fh)


@dataclass
class Verdict:
    predicted: str
    choice: str | None
    matched: bool
    parse_failure: bool = False
    judged: bool = False

    def to_dict(self) -> dict:
        return {"predicted": self.predicted, "choice": self.choice, "matched": self.matched,
                "parse_failure": self.parse_failure, "judged": self.judged}


@dataclass
class CotRecord:
    qa: QaPair
    status: str = "pending"
    reason: str | None = None
    detail: str | None = None
    mentions: list[dict] = field(default_factory=list)
    mappings: list[dict] = field(default_factory=list)
    bundle: dict | None = None
    cot: str | None = None
    verdict: Verdict | None = None

    def exclude(self, reason: str, detail: str | None = None) -> "CotRecord":
        assert reason in EXCLUSION_REASONS
        self.status, self.reason, self.detail = EXCLUDED, reason, detail
        return self

    def to_audit(self) -> dict:
        d: dict = {"id": self.qa.id, "source": self.qa.source, "question": self.qa.question}
        if self.qa.options is not None:
            d["options"] = [{"label": l, "text": t} for l, t in self.qa.options]
        d["answer"] = self.qa.answer_dict()
        d.update({
            "status": self.status, "reason": self.reason, "detail": self.detail,
            "mentions": self.mentions, "mappings": self.mappings, "bundle": self.bundle,
            "reasoning": self.cot, "verdict": self.verdict.to_dict() if self.verdict else None,
        })
        return d


def filtered_view(audit: dict) -> dict:
    out = {k: audit[k] for k in ("id", "source", "question")}
    if "options" in audit:
        out["options"] = audit["options"]
    out["answer"] = audit["answer"]
    out["reasoning"] = audit["reasoning"]
    return out


def generate_cot(qa: QaPair, bundle: PathBundle, llm: ChatGateway, graph: KnowledgeGraph,
                 prompts: PromptSet | None = None) -> str:
    paths = bundle.paths
    if not paths:
        raise ValueError("generate_cot needs a bundle with at least one path")
    prompt = render_prompt("generate", {
        "question": qa.question_block(), "answer": qa.answer_block(),
        "paths": render_path_list(paths, graph),
    }, prompts)
    for attempt in range(2):
        text = prompt if attempt == 0 else prompt + "\nYour previous reply was empty. Write the reasoning.\n"
        reply = llm.chat(ChatRequest("generate", text))
        if reply.strip():
            return reply.strip()
    raise GenerationError("generation returned empty text twice")


def eval_prompt(qa: QaPair, cot: str, prompts: PromptSet | None = None) -> str:
    # the gold answer is deliberately not a slot here
    return render_prompt("eval", {"question": qa.question_block(), "cot": cot}, prompts)


def judge_open_answer(qa: QaPair, predicted: str, llm: ChatGateway, prompts: PromptSet | None = None) -> bool:
    """Ask the LLM whether an open answer is equivalent to the gold; anything but YES is a no."""
    prompt = render_prompt("judge", {"question": qa.question, "gold": qa.gold_text, "predicted": predicted},
                           prompts)
    reply = llm.chat(ChatRequest("judge", prompt)).strip()
    words = reply.split()
    return bool(words) and words[0].strip(".,!:;\"'").casefold() == "yes"


def verify_cot(qa: QaPair, cot: str, llm: ChatGateway, prompts: PromptSet | None = None,
               judge: bool = False) -> Verdict:
    """Answer from the CoT alone, then match; ``judge`` adds an LLM equivalence check for open answers."""
    if not cot.strip():
        raise ValueError("verify_cot needs a non-empty CoT")
    prompt = eval_prompt(qa, cot, prompts)
    opts = effective_options(qa.options, qa.answer_text)
    reply = ""
    for attempt in range(2):
        text = prompt if attempt == 0 else (
            prompt + "\nYour previous reply could not be read. Reply only with \"The answer is X\".\n")
        reply = llm.chat(ChatRequest("eval", text)).strip()
        if opts:
            choice = extract_choice(reply, opts)
            if choice is not None:
                return Verdict(reply, choice, match_answer(reply, qa.answer_label, qa.answer_text, qa.options))
        else:
            predicted = strip_answer_prefix(reply)
            if predicted.strip():
                matched = match_answer(predicted, None, qa.answer_text, None)
                if matched or not judge:
                    return Verdict(reply, None, matched)
                return Verdict(reply, None, judge_open_answer(qa, predicted.strip(), llm, prompts), judged=True)
    return Verdict(reply, None, False, parse_failure=True)


@dataclass(frozen=True)
class PipelineConfig:
    mapping: MappingConfig = MappingConfig()
    k_paths: int = DEFAULT_K
    path_cap: int = DEFAULT_CAP
    workers: int = 1
    judge_open_answers: bool = False

    def __post_init__(self):
        if self.k_paths < 1 or self.path_cap < 1 or self.workers < 1:
            raise ValueError("k_paths, path_cap and workers must be >= 1")


@dataclass
class Context:
    graph: KnowledgeGraph
    index: EmbeddingIndex
    chat: ChatGateway
    embedder: EmbedGateway
    config: PipelineConfig = PipelineConfig()
    prompts: PromptSet | None = None

    def fingerprint(self, pairs: Sequence[QaPair]) -> str:
        prompts = self.prompts or PromptSet()
        blob = {
            "config": {"tau": self.config.mapping.tau, "k_candidates": self.config.mapping.k_candidates,
                       "max_per_origin": self.config.mapping.max_per_origin, "k_paths": self.config.k_paths,
                       "path_cap": self.config.path_cap, "judge": self.config.judge_open_answers},
            "chat": [self.chat.provider.provider_id, self.chat.provider.model_id],
            "embed": self.embedder.identity, "index": self.index.embedder_id,
            "templates": prompts.digests,
            "matching": MATCH_RULES_VERSION,
            "graph": [self.graph.node_count, self.graph.edge_count],
            "pairs": hashlib.sha256("\n".join(q.id for q in pairs).encode("utf-8")).hexdigest(),
        }
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode("utf-8")).hexdigest()


def process_pair(qa: QaPair, ctx: Context) -> CotRecord:
    rec = CotRecord(qa)
    cfg = ctx.config
    try:
        try:
            mentions = extract_entities(qa.question_block(), qa.gold_text, ctx.chat, ctx.prompts,
                                        cfg.mapping.max_per_origin)
        except ExtractionError as exc:
            return rec.exclude("llm-failure", f"extraction: {exc}")
        rec.mentions = [m.to_dict() for m in mentions]
        if not any(m.origin == QUESTION for m in mentions) or not any(m.origin == ANSWER for m in mentions):
            return rec.exclude("no-entities")

        mapping = map_all(mentions, ctx.graph, ctx.index, ctx.embedder, ctx.chat, cfg.mapping,
                          qa.question_block(), qa.answer_block(), ctx.prompts)
        by_key = {(m.mention.origin, m.mention.ordinal): m.to_dict(ctx.graph) for m in mapping.mapped}
        by_key.update({(u.mention.origin, u.mention.ordinal): u.to_dict() for u in mapping.unmapped})
        rec.mappings = [by_key[(m.origin, m.ordinal)] for m in mentions]
        if mapping.excluded:
            side = "question" if not mapping.question_nodes else "answer"
            return rec.exclude("no-mapping", f"no {side} entity mapped to the graph")

        bundle = collect_paths(mapping.question_nodes, mapping.answer_nodes, ctx.graph, ctx.chat,
                               qa.question_block(), cfg.k_paths, cfg.path_cap, ctx.prompts)
        rec.bundle = bundle.to_dict(ctx.graph)
        if bundle.empty:
            return rec.exclude("no-paths")

        try:
            rec.cot = generate_cot(qa, bundle, ctx.chat, ctx.graph, ctx.prompts)
        except GenerationError as exc:
            return rec.exclude("llm-failure", f"generation: {exc}")
        rec.status = GENERATED

        rec.verdict = verify_cot(qa, rec.cot, ctx.chat, ctx.prompts, cfg.judge_open_answers)
        rec.status = RETAINED if rec.verdict.matched else REJECTED
        return rec
    except CredentialError:
        raise
    except (ProviderError, IndexQueryError) as exc:
        logger.warning("pair %s: provider failure: %s", qa.id, exc)
        return rec.exclude("llm-failure", f"{type(exc).__name__}: {exc}")


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


class Checkpoint:
    """Per-pair completion state: ``manifest.json`` plus ``records/<sha1(id)>.json``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.records = self.root / "records"

    def _path(self, pair_id: str) -> Path:
        return self.records / (hashlib.sha1(pair_id.encode("utf-8")).hexdigest() + ".json")

    def start(self, fingerprint: str, resume: bool) -> None:
        manifest = self.root / "manifest.json"
        if resume and manifest.exists():
            stored = json.loads(manifest.read_text(encoding="utf-8")).get("fingerprint")
            if stored != fingerprint:
                raise CheckpointError(f"checkpoint in {self.root} was written with a different "
                                      "configuration or input; rerun without --resume")
        elif self.records.exists():
            shutil.rmtree(self.records)
        self.records.mkdir(parents=True, exist_ok=True)
        _atomic_write(manifest, _dump({"fingerprint": fingerprint}) + "\n")

    def load(self, pair_id: str) -> dict | None:
        path = self._path(pair_id)
        if not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return data if data.get("id") == pair_id else None

    def save(self, audit: dict) -> None:
        _atomic_write(self._path(audit["id"]), _dump(audit) + "\n")


@dataclass
class PipelineResult:
    audit: list[dict]
    stats: PipelineStats

    @property
    def filtered(self) -> list[dict]:
        return [filtered_view(a) for a in self.audit if a["status"] == RETAINED]

    def write(self, output_dir: str | Path) -> dict[str, Path]:
        out = Path(output_dir)
        paths = {name: out / name for name in ("filtered.jsonl", "audit.jsonl", "stats.json", "stats.txt")}
        _atomic_write(paths["filtered.jsonl"], "".join(_dump(r) + "\n" for r in self.filtered))
        _atomic_write(paths["audit.jsonl"], "".join(_dump(r) + "\n" for r in self.audit))
        _atomic_write(paths["stats.json"], json.dumps(self.stats.to_dict(), indent=2) + "\n")
        _atomic_write(paths["stats.txt"], self.stats.format_table() + "\n")
        return paths


def run_pipeline(pairs: Iterable[QaPair], ctx: Context, checkpoint_dir: str | Path | None = None,
                 resume: bool = False, output_dir: str | Path | None = None) -> PipelineResult:
    pairs = list(pairs)
    ids = [q.id for q in pairs]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate QA pair ids")
    ckpt = Checkpoint(checkpoint_dir) if checkpoint_dir is not None else None
    done: dict[str, dict] = {}
    if ckpt is not None:
        ckpt.start(ctx.fingerprint(pairs), resume)
        if resume:
            for q in pairs:
                hit = ckpt.load(q.id)
                if hit is not None:
                    done[q.id] = hit
            logger.info("resuming: %d of %d pairs already complete", len(done), len(pairs))

    todo = [q for q in pairs if q.id not in done]

    def work(qa: QaPair) -> dict:
        audit = process_pair(qa, ctx).to_audit()
        if ckpt is not None:
            ckpt.save(audit)
        return audit

    if ctx.config.workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=ctx.config.workers) as pool:
            for audit in pool.map(work, todo):
                done[audit["id"]] = audit
    else:
        for qa in todo:
            done[qa.id] = work(qa)

    audit = [done[q.id] for q in pairs]
    result = PipelineResult(audit, compute_stats(audit))
    if output_dir is not None:
        result.write(output_dir)
    return result
