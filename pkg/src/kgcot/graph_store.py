"""Immutable in-memory knowledge graph loaded from a triple CSV.

The default column layout follows the public PrimeKG ``kg.csv`` header::

    relation,display_relation,x_index,x_id,x_type,x_name,x_source,
    y_index,y_id,y_type,y_name,y_source

Edges are undirected for search purposes. Rows that repeat an edge, in
either orientation, collapse to a single edge per ``(endpoints, relation)``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import unicodedata
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"KGCOTGRF"
SNAPSHOT_VERSION = 1

DEFAULT_COLUMNS: dict[str, str] = {
    "x_id": "x_index",
    "x_name": "x_name",
    "x_type": "x_type",
    "x_source": "x_source",
    "relation": "relation",
    "display_relation": "display_relation",
    "y_id": "y_index",
    "y_name": "y_name",
    "y_type": "y_type",
    "y_source": "y_source",
}
REQUIRED_COLUMNS = (
    "x_id", "x_name", "x_type", "relation", "display_relation", "y_id", "y_name", "y_type",
)
OPTIONAL_COLUMNS = ("x_source", "y_source")


class IngestError(ValueError):
    """A graph file could not be ingested."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NodeLookupError(KeyError):
    pass


def fold_name(name: str) -> str:
    """Case-fold, trim and collapse internal whitespace."""
    return " ".join(unicodedata.normalize("NFKC", name).casefold().split())


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    category: str = ""
    source: str = ""


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    relation: str
    display_relation: str

    def other(self, node_id: int) -> int:
        return self.dst if node_id == self.src else self.src

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.src, self.dst, self.relation)


@dataclass(frozen=True)
class KnowledgeGraph:
    nodes: Mapping[int, Node]
    edges: tuple[Edge, ...]
    adjacency: Mapping[int, tuple[tuple[int, int], ...]] = field(repr=False)
    name_index: Mapping[str, tuple[int, ...]] = field(repr=False)

    @classmethod
    def from_parts(cls, nodes: Iterable[Node], edges: Iterable[Edge]) -> "KnowledgeGraph":
        node_map = {n.id: n for n in sorted(nodes, key=lambda n: n.id)}
        edge_list = tuple(sorted(edges, key=lambda e: (e.src, e.dst, e.relation)))
        adj: dict[int, list[tuple[int, int]]] = {nid: [] for nid in node_map}
        for i, e in enumerate(edge_list):
            if e.src not in node_map or e.dst not in node_map:
                raise IngestError(f"edge {e.key} references an unknown node")
            if e.src == e.dst:
                raise IngestError(f"self-loop on node {e.src}")
            adj[e.src].append((e.dst, i))
            adj[e.dst].append((e.src, i))
        adjacency = {
            nid: tuple(sorted(lst, key=lambda t: (t[0], edge_list[t[1]].relation)))
            for nid, lst in adj.items()
        }
        names: dict[str, list[int]] = {}
        for n in node_map.values():
            names.setdefault(fold_name(n.name), []).append(n.id)
        name_index = {k: tuple(sorted(v)) for k, v in names.items()}
        return cls(node_map, edge_list, adjacency, name_index)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def node(self, node_id: int) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NodeLookupError(f"unknown node id {node_id}") from None

    def node_by_name(self, name: str) -> Node | None:
        ids = self.name_index.get(fold_name(name))
        return self.nodes[ids[0]] if ids else None

    def neighbors(self, node_id: int) -> list[tuple[Node, Edge]]:
        """Incident (neighbor, edge) pairs in ascending neighbor-id order."""
        if node_id not in self.adjacency:
            raise NodeLookupError(f"unknown node id {node_id}")
        return [(self.nodes[v], self.edges[i]) for v, i in self.adjacency[node_id]]

    def neighbor_ids(self, node_id: int) -> list[int]:
        if node_id not in self.adjacency:
            raise NodeLookupError(f"unknown node id {node_id}")
        seen: list[int] = []
        for v, _ in self.adjacency[node_id]:
            if not seen or seen[-1] != v:
                seen.append(v)
        return seen

    def edges_between(self, u: int, v: int) -> list[Edge]:
        return [self.edges[i] for w, i in self.adjacency.get(u, ()) if w == v]


def node_by_name(graph: KnowledgeGraph, name: str) -> Node | None:
    return graph.node_by_name(name)


def neighbors(graph: KnowledgeGraph, node_id: int) -> list[tuple[Node, Edge]]:
    return graph.neighbors(node_id)


def _resolve_columns(header: list[str], column_map: Mapping[str, str] | None) -> dict[str, int]:
    cols = dict(DEFAULT_COLUMNS)
    if column_map:
        unknown = set(column_map) - set(DEFAULT_COLUMNS)
        if unknown:
            raise IngestError(f"unknown logical column(s) in column map: {sorted(unknown)}")
        cols.update(column_map)
    positions = {name: i for i, name in enumerate(header)}
    resolved: dict[str, int] = {}
    for logical in REQUIRED_COLUMNS:
        physical = cols[logical]
        if physical not in positions:
            raise IngestError(f"missing column {physical!r} (for {logical})", line=1)
        resolved[logical] = positions[physical]
    for logical in OPTIONAL_COLUMNS:
        physical = cols[logical]
        if physical in positions:
            resolved[logical] = positions[physical]
    return resolved


def load_graph(source: IO[str] | str | Path, column_map: Mapping[str, str] | None = None) -> KnowledgeGraph:
    """Load a triple CSV (file handle or path) into a :class:`KnowledgeGraph`."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return load_graph(fh, column_map)

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        return KnowledgeGraph.from_parts([], [])
    cols = _resolve_columns(header, column_map)

    nodes: dict[int, Node] = {}
    # (lo, hi, relation) -> candidate display relations; min() keeps the result order-independent
    edges: dict[tuple[int, int, str], set[str]] = {}
    self_loops = 0

    def make_node(row: list[str], side: str, line: int) -> Node:
        raw_id = row[cols[f"{side}_id"]].strip()
        try:
            nid = int(raw_id)
        except ValueError:
            raise IngestError(f"{side}_id {raw_id!r} is not an integer", line) from None
        name = row[cols[f"{side}_name"]].strip()
        if not name:
            raise IngestError(f"empty {side}_name", line)
        src_col = cols.get(f"{side}_source")
        node = Node(nid, name, row[cols[f"{side}_type"]].strip(),
                    row[src_col].strip() if src_col is not None else "")
        known = nodes.get(nid)
        if known is None:
            nodes[nid] = node
        elif known.name != node.name:
            raise IngestError(f"node {nid} named both {known.name!r} and {node.name!r}", line)
        return nodes[nid]

    for line, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise IngestError(f"expected {len(header)} fields, got {len(row)}", line)
        x = make_node(row, "x", line)
        y = make_node(row, "y", line)
        relation = row[cols["relation"]].strip()
        if not relation:
            raise IngestError("empty relation", line)
        display = row[cols["display_relation"]].strip() or relation
        if x.id == y.id:
            self_loops += 1
            continue
        lo, hi = sorted((x.id, y.id))
        edges.setdefault((lo, hi, relation), set()).add(display)

    if self_loops:
        logger.info("skipped %d self-loop rows", self_loops)
    edge_objs = [Edge(lo, hi, rel, min(disp)) for (lo, hi, rel), disp in edges.items()]
    return KnowledgeGraph.from_parts(nodes.values(), edge_objs)


def write_graph_csv(graph: KnowledgeGraph, fh: IO[str]) -> None:
    """Write ``graph`` in the default column layout; ``load_graph`` reads it back."""
    writer = csv.writer(fh, lineterminator="\n")
    header = [DEFAULT_COLUMNS[k] for k in (
        "relation", "display_relation", "x_id", "x_type", "x_name", "x_source",
        "y_id", "y_type", "y_name", "y_source")]
    writer.writerow(header)
    for e in graph.edges:
        x, y = graph.nodes[e.src], graph.nodes[e.dst]
        writer.writerow([e.relation, e.display_relation, x.id, x.category, x.name, x.source,
                         y.id, y.category, y.name, y.source])
    # isolated nodes cannot be expressed as triples; they are dropped by the CSV form


def save_snapshot(graph: KnowledgeGraph, path: str | Path) -> None:
    payload = {
        "nodes": [[n.id, n.name, n.category, n.source] for n in graph.nodes.values()],
        "edges": [[e.src, e.dst, e.relation, e.display_relation] for e in graph.edges],
    }
    body = zlib.compress(json.dumps(payload, separators=(",", ":"), ensure_ascii=False).encode("utf-8"))
    header = json.dumps({"format": "kgcot-graph", "version": SNAPSHOT_VERSION,
                         "nodes": graph.node_count, "edges": graph.edge_count,
                         "compression": "zlib"}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(body)


def load_snapshot(path: str | Path) -> KnowledgeGraph:
    data = Path(path).read_bytes()
    if data[:8] != SNAPSHOT_MAGIC:
        raise IngestError(f"{path} is not a graph snapshot")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen])
    if header.get("version") != SNAPSHOT_VERSION:
        raise IngestError(f"unsupported snapshot version {header.get('version')}")
    payload = json.loads(zlib.decompress(data[12 + hlen:]))
    nodes = [Node(*row) for row in payload["nodes"]]
    edges = [Edge(*row) for row in payload["edges"]]
    return KnowledgeGraph.from_parts(nodes, edges)


def graph_to_csv_text(graph: KnowledgeGraph) -> str:
    buf = io.StringIO()
    write_graph_csv(graph, buf)
    return buf.getvalue()
