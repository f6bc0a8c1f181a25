"""Knowledge-graph grounded chain-of-thought data synthesis."""

from .embed_index import CandidateSet, EmbeddingIndex, build_index, cosine, top_k
from .entity_mapper import (
    EntityMention,
    MappedEntity,
    MappingConfig,
    extract_entities,
    map_all,
    map_entity,
)
from .graph_store import Edge, KnowledgeGraph, Node, load_graph, neighbors, node_by_name
from .matching import match_answer
from .path_engine import PathBundle, ReasoningPath, all_shortest_paths, collect_paths, prune_paths
from .pipeline import (
    Context,
    CotRecord,
    PipelineConfig,
    QaPair,
    generate_cot,
    run_pipeline,
    verify_cot,
)
from .stats import PipelineStats, compute_stats

__version__ = "0.1.0"

__all__ = [
    "CandidateSet", "EmbeddingIndex", "build_index", "cosine", "top_k",
    "EntityMention", "MappedEntity", "MappingConfig", "extract_entities", "map_all", "map_entity",
    "Edge", "KnowledgeGraph", "Node", "load_graph", "neighbors", "node_by_name",
    "match_answer",
    "PathBundle", "ReasoningPath", "all_shortest_paths", "collect_paths", "prune_paths",
    "Context", "CotRecord", "PipelineConfig", "QaPair", "generate_cot", "run_pipeline", "verify_cot",
    "PipelineStats", "compute_stats",
]
