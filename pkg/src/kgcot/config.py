"""Run configuration: one YAML file, overridable from the command line.

Relative paths in the file resolve against the file's directory. Example::

    graph:
      path: graph.csv
      columns: {}            # logical column -> CSV header override
    index:
      path: work/index.bin
    cache_dir: work/cache    # optional response/embedding cache
    templates_dir: null      # optional prompt overrides
    providers:
      chat:  {provider: scripted, options: {rules: rules.yaml}}
      embed: {provider: scripted, options: {rules: rules.yaml}}
    mapping:  {tau: 0.85, k_candidates: 10, max_per_origin: 16}
    paths:    {k: 3, cap: 64}
    pipeline: {workers: 4, checkpoint_dir: work/checkpoint, output_dir: work/out,
               judge_open_answers: false}  # LLM equivalence check for open answers
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .entity_mapper import DEFAULT_K_CANDIDATES, DEFAULT_MAX_PER_ORIGIN, DEFAULT_TAU, MappingConfig
from .graph_store import DEFAULT_COLUMNS
from .llm.gateway import ProviderConfig
from .path_engine import DEFAULT_CAP, DEFAULT_K
from .pipeline import PipelineConfig


class ConfigError(ValueError):
    pass


_PROVIDER_FIELDS = {f.name for f in fields(ProviderConfig)}


def _provider(data: Mapping | None, base: Path) -> ProviderConfig:
    data = dict(data or {})
    unknown = set(data) - _PROVIDER_FIELDS
    if unknown:
        raise ConfigError(f"unknown provider setting(s): {sorted(unknown)}")
    options = dict(data.get("options") or {})
    if options.get("rules"):
        options["rules"] = str(_resolve(options["rules"], base))
    data["options"] = options
    try:
        return ProviderConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"provider config: {exc}") from None


def _resolve(value: str | Path | None, base: Path) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() else base / p


@dataclass
class RunConfig:
    graph_path: Path | None = None
    columns: dict[str, str] = field(default_factory=dict)
    index_path: Path | None = None
    cache_dir: Path | None = None
    templates_dir: Path | None = None
    chat: ProviderConfig = field(default_factory=ProviderConfig)
    embed: ProviderConfig = field(default_factory=ProviderConfig)
    tau: float = DEFAULT_TAU
    k_candidates: int = DEFAULT_K_CANDIDATES
    max_per_origin: int = DEFAULT_MAX_PER_ORIGIN
    k_paths: int = DEFAULT_K
    path_cap: int = DEFAULT_CAP
    workers: int = 1
    judge_open_answers: bool = False
    checkpoint_dir: Path | None = None
    output_dir: Path | None = None

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: Path) -> "RunConfig":
        known = {"graph", "index", "cache_dir", "templates_dir", "providers", "mapping", "paths", "pipeline"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        graph = data.get("graph") or {}
        providers = data.get("providers") or {}
        mapping = data.get("mapping") or {}
        paths = data.get("paths") or {}
        pipeline = data.get("pipeline") or {}
        try:
            return cls(
                graph_path=_resolve(graph.get("path"), base),
                columns=dict(graph.get("columns") or {}),
                index_path=_resolve((data.get("index") or {}).get("path"), base),
                cache_dir=_resolve(data.get("cache_dir"), base),
                templates_dir=_resolve(data.get("templates_dir"), base),
                chat=_provider(providers.get("chat"), base),
                embed=_provider(providers.get("embed"), base),
                tau=float(mapping.get("tau", DEFAULT_TAU)),
                k_candidates=int(mapping.get("k_candidates", DEFAULT_K_CANDIDATES)),
                max_per_origin=int(mapping.get("max_per_origin", DEFAULT_MAX_PER_ORIGIN)),
                k_paths=int(paths.get("k", DEFAULT_K)),
                path_cap=int(paths.get("cap", DEFAULT_CAP)),
                workers=int(pipeline.get("workers", 1)),
                judge_open_answers=bool(pipeline.get("judge_open_answers", False)),
                checkpoint_dir=_resolve(pipeline.get("checkpoint_dir"), base),
                output_dir=_resolve(pipeline.get("output_dir"), base),
            )
        except (TypeError, ValueError, AttributeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_mapping(data, path.resolve().parent)

    def override(self, **values: Any) -> "RunConfig":
        """Apply non-None flag values; flags win over the file."""
        for key, value in values.items():
            if value is None:
                continue
            if not hasattr(self, key):
                raise ConfigError(f"unknown setting {key!r}")
            if key.endswith(("_path", "_dir")):
                value = Path(value)
            setattr(self, key, value)
        return self

    def mapping_config(self) -> MappingConfig:
        return MappingConfig(self.tau, self.k_candidates, self.max_per_origin)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(self.mapping_config(), self.k_paths, self.path_cap, self.workers,
                              self.judge_open_answers)

    def validate(self, *, need_index: bool, need_chat: bool, need_outputs: bool) -> None:
        """Check everything up front so a bad config never reaches a provider or the disk."""
        problems: list[str] = []
        if self.graph_path is None:
            problems.append("graph path is not set")
        elif not self.graph_path.is_file():
            problems.append(f"graph file not found: {self.graph_path}")
        bad_cols = set(self.columns) - set(DEFAULT_COLUMNS)
        if bad_cols:
            problems.append(f"unknown logical column(s): {sorted(bad_cols)}")
        if self.index_path is None:
            problems.append("index path is not set")
        elif need_index and not self.index_path.is_file():
            problems.append(f"index file not found: {self.index_path} (run build-index first)")
        if self.templates_dir is not None and not self.templates_dir.is_dir():
            problems.append(f"templates directory not found: {self.templates_dir}")
        providers = [("embed", self.embed)] + ([("chat", self.chat)] if need_chat else [])
        for name, pc in providers:
            if pc.provider not in ("scripted", "openai"):
                problems.append(f"{name} provider {pc.provider!r} is not one of scripted, openai")
            rules = pc.options.get("rules")
            if pc.provider == "scripted" and name == "chat" and not rules:
                problems.append("scripted chat provider needs options.rules")
            if rules and not Path(rules).is_file():
                problems.append(f"{name} rules file not found: {rules}")
            if pc.provider == "openai" and not pc.endpoint:
                problems.append(f"{name} provider needs an endpoint")
        try:
            self.pipeline_config()
        except ValueError as exc:
            problems.append(str(exc))
        if need_outputs and self.output_dir is None:
            problems.append("pipeline output_dir is not set")
        if problems:
            raise ConfigError("; ".join(problems))
