"""Command-line entry point: ``kgcot {build-index,run,inspect,stats}``.

Exit status is 0 on success, 1 when the operation failed at runtime and 2
for invalid configuration or input (detected before any provider call).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig
from .embed_index import EmbeddingIndex, IndexBuildError, IndexFormatError, build_index
from .graph_store import IngestError, load_graph
from .llm.gateway import ChatGateway, EmbedGateway, ProviderError, ResponseCache
from .llm.prompts import PromptSet, TemplateError
from .llm.providers import make_chat_provider, make_embed_provider
from .path_engine import ARROW
from .pipeline import CheckpointError, Context, InputError, load_qa, run_pipeline
from .stats import PipelineStats, compute_stats

logger = logging.getLogger("kgcot")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _add_config_flags(p: argparse.ArgumentParser, *, providers: bool) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration file")
    p.add_argument("--graph", type=Path, help="knowledge-graph triple CSV (overrides graph.path)")
    p.add_argument("--index", type=Path, help="embedding index file (overrides index.path)")
    if providers:
        p.add_argument("--cache-dir", type=Path, help="directory for cached provider responses")
        p.add_argument("--rules", type=Path,
                       help="scripted-provider rule file, used by every scripted provider")
        p.add_argument("--embed-provider", choices=["scripted", "openai"], help="embedding provider")
        p.add_argument("--embed-model", help="embedding model id")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgcot", description="Knowledge-graph grounded chain-of-thought data synthesis.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("build-index", help="embed graph node names and persist the index",
                       description="Load the graph, embed every node name and write the index file.")
    _add_config_flags(p, providers=True)

    p = sub.add_parser("run", help="generate and filter CoT records for a QA JSONL file",
                       description="Run extraction, mapping, path search, generation and filtering.")
    _add_config_flags(p, providers=True)
    p.add_argument("--input", type=Path, required=True, help="QA pairs in JSONL format")
    p.add_argument("--output-dir", type=Path, help="directory for filtered/audit/stats outputs")
    p.add_argument("--checkpoint-dir", type=Path, help="directory holding per-pair checkpoint state")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint instead of restarting")
    p.add_argument("--chat-provider", choices=["scripted", "openai"], help="chat provider")
    p.add_argument("--chat-model", help="chat model id")
    p.add_argument("--templates-dir", type=Path, help="directory with prompt template overrides")
    p.add_argument("--workers", type=int, help="number of QA pairs processed concurrently")
    p.add_argument("--tau", type=float, help="similarity threshold for stage-2 mapping (default 0.85)")
    p.add_argument("--k-candidates", type=int, help="candidate-set size for mapping (default 10)")
    p.add_argument("--k-paths", type=int, help="paths kept per entity pair after pruning (default 3)")
    p.add_argument("--path-cap", type=int, help="max shortest paths enumerated per pair (default 64)")
    p.add_argument("--judge-open-answers", action="store_true", default=None,
                   help="let the LLM judge open answers that are not an exact match (default off)")

    p = sub.add_parser("inspect", help="pretty-print a record, its paths or mapping, or the stats table",
                       description="TARGET is a record id, 'paths ID', 'mapping ID' or 'stats'.")
    p.add_argument("target", help="record id, or one of: paths, mapping, stats")
    p.add_argument("record_id", nargs="?", help="record id when TARGET is paths or mapping")
    p.add_argument("--config", type=Path, help="YAML run configuration file")
    p.add_argument("--output-dir", type=Path, help="run output directory (default from config)")
    p.add_argument("--audit", type=Path, help="audit JSONL file (default OUTPUT_DIR/audit.jsonl)")

    p = sub.add_parser("stats", help="recompute stats from an audit file and check them",
                       description="Recompute the stats table from audit records; exit 1 when it "
                                   "disagrees with the stored stats record.")
    p.add_argument("--config", type=Path, help="YAML run configuration file")
    p.add_argument("--output-dir", type=Path, help="run output directory (default from config)")
    p.add_argument("--audit", type=Path, help="audit JSONL file (default OUTPUT_DIR/audit.jsonl)")
    p.add_argument("--stats-file", type=Path, help="stored stats record (default: stats.json beside the audit)")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.override(
        graph_path=getattr(args, "graph", None), index_path=getattr(args, "index", None),
        cache_dir=getattr(args, "cache_dir", None), templates_dir=getattr(args, "templates_dir", None),
        output_dir=getattr(args, "output_dir", None), checkpoint_dir=getattr(args, "checkpoint_dir", None),
        workers=getattr(args, "workers", None), tau=getattr(args, "tau", None),
        k_candidates=getattr(args, "k_candidates", None), k_paths=getattr(args, "k_paths", None),
        path_cap=getattr(args, "path_cap", None),
        judge_open_answers=getattr(args, "judge_open_answers", None),
    )
    if getattr(args, "rules", None):
        for pc in (cfg.chat, cfg.embed):
            if pc.provider == "scripted":
                pc.options["rules"] = str(args.rules)
    for attr, pc, field_ in (("chat_provider", cfg.chat, "provider"), ("chat_model", cfg.chat, "model"),
                             ("embed_provider", cfg.embed, "provider"), ("embed_model", cfg.embed, "model")):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(pc, field_, value)
    return cfg


def _embed_gateway(cfg: RunConfig, cache: ResponseCache) -> EmbedGateway:
    return EmbedGateway(make_embed_provider(cfg.embed), cfg.embed, cache=cache)


def cmd_build_index(args: argparse.Namespace) -> int:
    cfg = _config(args)
    cfg.validate(need_index=False, need_chat=False, need_outputs=False)
    graph = load_graph(cfg.graph_path, cfg.columns)
    embedder = _embed_gateway(cfg, ResponseCache(cfg.cache_dir))
    index = build_index(graph, embedder)
    cfg.index_path.parent.mkdir(parents=True, exist_ok=True)
    index.save(cfg.index_path)
    print(f"{graph.node_count} nodes, {graph.edge_count} edges, {len(index)} vectors")
    print(f"index written to {cfg.index_path} ({embedder.identity}, dimension {index.dimension})")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    cfg.validate(need_index=True, need_chat=True, need_outputs=True)
    if not args.input.is_file():
        raise CliError(f"input file not found: {args.input}", EXIT_USAGE)
    try:
        pairs = load_qa(args.input)
    except InputError as exc:
        raise CliError(f"{args.input}: {exc}", EXIT_USAGE) from None
    prompts = PromptSet(cfg.templates_dir)
    graph = load_graph(cfg.graph_path, cfg.columns)
    index = EmbeddingIndex.load(cfg.index_path, graph)
    cache = ResponseCache(cfg.cache_dir)
    embedder = _embed_gateway(cfg, cache)
    if index.embedder_id != embedder.identity:
        raise CliError(f"index was built with {index.embedder_id}, configured embedder is "
                       f"{embedder.identity}; rebuild the index", EXIT_USAGE)
    chat = ChatGateway(make_chat_provider(cfg.chat), cfg.chat, cache=cache)
    ctx = Context(graph, index, chat, embedder, cfg.pipeline_config(), prompts)
    result = run_pipeline(pairs, ctx, cfg.checkpoint_dir, args.resume, cfg.output_dir)
    print(result.stats.format_table())
    print(f"raw / generated / filtered: {result.stats.summary_line()}")
    print(f"outputs written to {cfg.output_dir}")
    return EXIT_OK


def _audit_path(args: argparse.Namespace) -> Path:
    if args.audit:
        return args.audit
    cfg = _config(args)
    if cfg.output_dir is None:
        raise CliError("no audit file: pass --audit, --output-dir or a config with pipeline.output_dir",
                       EXIT_USAGE)
    return cfg.output_dir / "audit.jsonl"


def _read_audit(path: Path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise CliError(f"cannot read audit file {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: corrupt audit record: {exc}") from None


def _render_path(p: dict) -> str:
    parts = [p["names"][0]]
    for rel, name in zip(p["relations"], p["names"][1:]):
        parts += [ARROW.format(rel=rel), name]
    return " ".join(parts)


def render_mapping(rec: dict) -> list[str]:
    lines = ["mentions:"]
    if not rec.get("mappings") and not rec.get("mentions"):
        lines.append("  (none)")
    for m in rec.get("mappings") or rec.get("mentions") or []:
        head = f"  {m['origin']}#{m['ordinal']} {m['surface']!r}"
        if m.get("stage"):
            score = f", {m['score']:.3f}" if m.get("score") is not None else ""
            lines.append(f"{head} -> {m.get('name', m['node'])} [{m['stage']}{score}]")
        elif "reason" in m:
            lines.append(f"{head} -> unmapped ({m['reason']})")
        else:
            lines.append(head)
    return lines


def render_paths(rec: dict) -> list[str]:
    lines = ["paths:"]
    pairs = (rec.get("bundle") or {}).get("pairs") or []
    if not pairs:
        lines.append("  (empty bundle)")
    names = {m["node"]: m.get("name", str(m["node"])) for m in rec.get("mappings", []) if m.get("node") is not None}
    for pair in pairs:
        flags = [f"{pair['raw_count']} shortest"] if pair["status"] == "connected" else []
        flags += [f for f in ("truncated", "fallback") if pair.get(f)]
        head = f"  {names.get(pair['question'], pair['question'])} x {names.get(pair['answer'], pair['answer'])}"
        lines.append(f"{head}: {pair['status']}" + (f" ({', '.join(flags)})" if flags else ""))
        lines += [f"    {_render_path(p)}" for p in pair["paths"]]
    return lines


def render_record(rec: dict) -> str:
    status = rec["status"] + (f" ({rec['reason']})" if rec.get("reason") else "")
    lines = [f"record {rec['id']} [{rec['source']}]  status: {status}"]
    if rec.get("detail"):
        lines.append(f"detail: {rec['detail']}")
    lines.append(f"question: {rec['question']}")
    for o in rec.get("options") or []:
        lines.append(f"  {o['label']}. {o['text']}")
    ans = dict(rec["answer"])
    if "text" not in ans and "label" in ans:
        ans["text"] = {o["label"]: o["text"] for o in rec.get("options") or []}.get(ans["label"], "")
    lines.append("answer: " + ". ".join(str(ans[k]) for k in ("label", "text") if ans.get(k)))
    lines += render_mapping(rec) + render_paths(rec)
    lines.append("reasoning:")
    lines += [f"  {l}" for l in (rec.get("reasoning") or "(none)").splitlines()]
    v = rec.get("verdict")
    if v:
        outcome = "matched" if v["matched"] else "not matched"
        if v.get("parse_failure"):
            outcome += ", unparseable"
        if v.get("judged"):
            outcome += ", judged"
        lines.append(f"verdict: {v['predicted']!r} -> {v.get('choice') or '-'} ({outcome})")
    else:
        lines.append("verdict: (none)")
    return "\n".join(lines)


def cmd_inspect(args: argparse.Namespace) -> int:
    audit_path = _audit_path(args)
    if args.target == "stats":
        stats_file = audit_path.parent / "stats.json"
        if stats_file.exists():
            stats = PipelineStats.from_dict(json.loads(stats_file.read_text(encoding="utf-8")))
        else:
            stats = compute_stats(_read_audit(audit_path))
        print(stats.format_table())
        return EXIT_OK
    view = "full"
    record_id = args.target
    if args.target in ("paths", "mapping"):
        if not args.record_id:
            raise CliError(f"inspect {args.target} needs a record id", EXIT_USAGE)
        view, record_id = args.target, args.record_id
    records = {r["id"]: r for r in _read_audit(audit_path)}
    if record_id not in records:
        raise CliError(f"no record with id {record_id!r} in {audit_path}")
    rec = records[record_id]
    if view == "paths":
        print("\n".join(render_paths(rec)))
    elif view == "mapping":
        print("\n".join(render_mapping(rec)))
    else:
        print(render_record(rec))
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    audit_path = _audit_path(args)
    stats = compute_stats(_read_audit(audit_path))
    print(stats.format_table())
    stored_path = args.stats_file or audit_path.parent / "stats.json"
    if not stored_path.exists():
        print(f"no stored stats record at {stored_path}; nothing to compare")
        return EXIT_OK
    stored = json.loads(stored_path.read_text(encoding="utf-8"))
    if stored != stats.to_dict():
        print(f"MISMATCH: recomputed stats differ from {stored_path}", file=sys.stderr)
        print(f"  stored:     {PipelineStats.from_dict(stored).summary_line()}", file=sys.stderr)
        print(f"  recomputed: {stats.summary_line()}", file=sys.stderr)
        return EXIT_FAIL
    print(f"consistent with {stored_path}")
    return EXIT_OK


COMMANDS = {"build-index": cmd_build_index, "run": cmd_run, "inspect": cmd_inspect, "stats": cmd_stats}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, TemplateError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, IndexFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (IndexBuildError, CheckpointError, ProviderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
