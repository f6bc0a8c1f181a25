"""Exact cosine-similarity index over node names.

Persisted format (little-endian)::

    8 bytes   magic b"KGCOTIDX"
    uint32    header length H
    H bytes   UTF-8 JSON header {"format", "version", "embedder", "dimension", "count", "dtype"}
    count     int64 node ids, ascending
    count*dim float32 vectors, one row per node id
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph_store import KnowledgeGraph
from .llm.gateway import EmbedGateway, ProviderError

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"KGCOTIDX"
INDEX_VERSION = 1


class IndexBuildError(RuntimeError):
    pass


class IndexQueryError(RuntimeError):
    pass


class IndexFormatError(ValueError):
    pass


class UndefinedSimilarityError(ValueError):
    pass


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine is undefined for a zero vector")
    return max(-1.0, min(1.0, float(a.dot(b)) / (na * nb)))


@dataclass(frozen=True)
class Candidate:
    node_id: int
    name: str
    score: float


@dataclass(frozen=True)
class CandidateSet:
    query: str
    entries: tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i: int) -> Candidate:
        return self.entries[i]


class EmbeddingIndex:
    def __init__(self, node_ids: np.ndarray, names: Sequence[str], vectors: np.ndarray, embedder_id: str):
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.names = list(names)
        # float32 is the storage precision; scoring happens in float64
        self.vectors = np.asarray(vectors, dtype="<f4")
        self.embedder_id = embedder_id
        self._mat = self.vectors.astype(np.float64)
        self._norms = np.linalg.norm(self._mat, axis=1)

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.ndim == 2 and len(self) else 0

    def scores(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        qn = float(np.linalg.norm(q))
        if qn == 0.0:
            raise UndefinedSimilarityError("query embedding is a zero vector")
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self._mat @ q) / (self._norms * qn)
        s[self._norms == 0.0] = -np.inf
        return np.clip(s, -1.0, 1.0)

    def search(self, query: np.ndarray, k: int, text: str = "") -> CandidateSet:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not len(self):
            raise IndexQueryError("index is empty")
        s = self.scores(query)
        order = np.lexsort((self.node_ids, -s))[:k]
        return CandidateSet(text, tuple(
            Candidate(int(self.node_ids[i]), self.names[i], float(s[i])) for i in order))

    def top_k(self, text: str, k: int, embedder: EmbedGateway) -> CandidateSet:
        try:
            query = embedder.embed([text])[0]
        except ProviderError as exc:
            raise IndexQueryError(f"embedding query {text!r} failed: {exc}") from exc
        if query.shape[0] != self.dimension:
            raise IndexQueryError(f"query dimension {query.shape[0]} != index dimension {self.dimension}")
        return self.search(query, k, text)

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "format": "kgcot-index", "version": INDEX_VERSION, "embedder": self.embedder_id,
            "dimension": self.dimension, "count": len(self), "dtype": "<f4",
        }, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return b"".join([
            INDEX_MAGIC, struct.pack("<I", len(header)), header,
            self.node_ids.astype("<i8").tobytes(), self.vectors.astype("<f4").tobytes(),
        ])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, graph: KnowledgeGraph | None = None) -> "EmbeddingIndex":
        data = Path(path).read_bytes()
        if data[:8] != INDEX_MAGIC:
            raise IndexFormatError(f"{path}: not an index file")
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12:12 + hlen])
        if header.get("version") != INDEX_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {header.get('version')}")
        n, d = header["count"], header["dimension"]
        off = 12 + hlen
        ids = np.frombuffer(data, dtype="<i8", count=n, offset=off)
        vecs = np.frombuffer(data, dtype="<f4", count=n * d, offset=off + 8 * n).reshape(n, d)
        if graph is not None:
            missing = [int(i) for i in ids if int(i) not in graph.nodes]
            if missing or n != graph.node_count:
                raise IndexFormatError(f"{path}: index does not match the graph ({n} vectors, "
                                       f"{graph.node_count} nodes)")
            names = [graph.nodes[int(i)].name for i in ids]
        else:
            names = [str(int(i)) for i in ids]
        return cls(ids, names, vecs, header["embedder"])


def build_index(graph: KnowledgeGraph, embedder: EmbedGateway, batch_size: int | None = None,
                workers: int | None = None) -> EmbeddingIndex:
    """Embed every node name; batches run concurrently up to the gateway's in-flight limit."""
    nodes = [graph.nodes[i] for i in sorted(graph.nodes)]
    bs = batch_size or embedder.config.batch_size
    batches = [nodes[i:i + bs] for i in range(0, len(nodes), bs)]
    workers = workers or embedder.config.in_flight

    def run(batch_no: int):
        batch = batches[batch_no]
        try:
            return embedder.embed([n.name for n in batch])
        except ProviderError as exc:
            raise IndexBuildError(f"embedding batch {batch_no} (node ids {batch[0].id}..{batch[-1].id}) "
                                  f"failed: {exc}") from exc

    if not batches:
        return EmbeddingIndex(np.zeros(0, np.int64), [], np.zeros((0, 0), "<f4"), embedder.identity)
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(batches)))) as pool:
        results = list(pool.map(run, range(len(batches))))
    dims = [r.shape[1] for r in results]
    if len(set(dims)) != 1:
        bad = next(i for i, d in enumerate(dims) if d != dims[0])
        raise IndexBuildError(f"dimension mismatch: batch 0 has {dims[0]}, batch {bad} has {dims[bad]}")
    vectors = np.concatenate(results, axis=0)
    if not np.all(np.isfinite(vectors)):
        raise IndexBuildError("non-finite embedding values")
    logger.info("indexed %d nodes (dimension %d)", len(nodes), dims[0])
    return EmbeddingIndex(np.array([n.id for n in nodes], dtype=np.int64), [n.name for n in nodes],
                          vectors, embedder.identity)


def top_k(index: EmbeddingIndex, text: str, k: int, embedder: EmbedGateway) -> CandidateSet:
    return index.top_k(text, k, embedder)

